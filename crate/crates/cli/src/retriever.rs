use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use coir_core::datasets::toy::CaptionRow;
use coir_core::datasets::{load_corpus, load_triplets, Corpus, Manifest, Split, Triplet};
use coir_core::metrics::{embed_corpus, embed_queries, EvalQuery};
use coir_core::model::{load_checkpoint, QueryMode};
use coir_core::redundancy::{bow_retriever, pixel_retriever};
use coir_core::retrieval::{load_index, EmbeddingIndex};
use serde::Deserialize;

use crate::SplitArg;

/// A dataset directory: `manifest.json`, `train.jsonl`, `val.jsonl` and
/// optionally `captions.jsonl`.
pub struct DataDir {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub split: SplitArg,
}

impl DataDir {
    pub fn open(root: &Path, split: SplitArg) -> Result<Self> {
        Ok(Self {
            root: root.to_path_buf(),
            manifest: Manifest::load(&root.join("manifest.json"))?,
            split,
        })
    }

    fn split_filter(&self) -> Option<Split> {
        match self.split {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Val => Some(Split::Val),
            SplitArg::All => None,
        }
    }

    pub fn triplets(&self) -> Result<Vec<Triplet>> {
        let names: &[&str] = match self.split {
            SplitArg::Train => &["train.jsonl"],
            SplitArg::Val => &["val.jsonl"],
            SplitArg::All => &["train.jsonl", "val.jsonl"],
        };
        let mut out = Vec::new();
        for n in names {
            out.extend(load_triplets(&self.root.join(n))?);
        }
        Ok(out)
    }

    pub fn corpus(&self) -> Result<Corpus> {
        Ok(load_corpus(&self.manifest, &self.root, self.split_filter())?)
    }

    /// Captions of the split's images, in manifest order.
    pub fn captions(&self) -> Result<Vec<(String, String)>> {
        let path = self.root.join("captions.jsonl");
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let mut by_id = std::collections::HashMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let row = CaptionRow::deserialize(&mut serde_json::Deserializer::from_str(line))
                .with_context(|| format!("{}: line {}", path.display(), i + 1))?;
            by_id.insert(row.id, row.caption);
        }
        self.manifest
            .ids(self.split_filter())
            .into_iter()
            .map(|id| {
                by_id
                    .get(id)
                    .map(|c| (id.to_string(), c.clone()))
                    .ok_or_else(|| anyhow!("{}: no caption for image {id}", path.display()))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RetrieverSpec {
    TextBow,
    PixelMean,
    Model { mode: QueryMode, path: PathBuf },
    Cemb { queries: PathBuf, index: PathBuf },
}

impl FromStr for RetrieverSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.splitn(3, ':');
        match (parts.next(), parts.next(), parts.next()) {
            (Some("text_bow"), None, None) => Ok(Self::TextBow),
            (Some("pixel_mean"), None, None) => Ok(Self::PixelMean),
            (Some("model"), Some(mode), Some(path)) => Ok(Self::Model {
                mode: mode.parse()?,
                path: path.into(),
            }),
            (Some("cemb"), Some(q), Some(i)) => Ok(Self::Cemb {
                queries: q.into(),
                index: i.into(),
            }),
            _ => bail!("unknown retriever {s:?} (expected text_bow, pixel_mean, model:MODE:CKPT or cemb:QUERIES:INDEX)"),
        }
    }
}

/// Query embeddings from a qid-keyed CEMB, in triplet order.
pub fn queries_from_cemb(triplets: &[Triplet], queries: &EmbeddingIndex) -> Result<Vec<EvalQuery>> {
    triplets
        .iter()
        .map(|t| {
            Ok(EvalQuery {
                qid: t.qid.clone(),
                embedding: queries
                    .vector(&t.qid)
                    .ok_or_else(|| anyhow!("query {} has no embedding", t.qid))?
                    .to_vec(),
                target_id: t.target_image.clone(),
                category: t.category.clone(),
                subset: t.subset.clone(),
            })
        })
        .collect()
}

pub fn build(spec: &RetrieverSpec, data: &DataDir, triplets: &[Triplet]) -> Result<(Vec<EvalQuery>, EmbeddingIndex)> {
    Ok(match spec {
        RetrieverSpec::TextBow => {
            let captions = data.captions()?;
            bow_retriever(triplets, captions.iter().map(|(i, c)| (i.as_str(), c.as_str())))?
        }
        RetrieverSpec::PixelMean => pixel_retriever(triplets, &data.corpus()?)?,
        RetrieverSpec::Model { mode, path } => {
            let model = load_checkpoint(path)?;
            let corpus = data.corpus()?;
            (embed_queries(&model, triplets, &corpus, *mode)?, embed_corpus(&model, &corpus)?)
        }
        RetrieverSpec::Cemb { queries, index } => {
            let q = load_index(queries)?;
            (queries_from_cemb(triplets, &q)?, load_index(index)?)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_parsing() {
        assert_eq!("text_bow".parse::<RetrieverSpec>().unwrap(), RetrieverSpec::TextBow);
        assert_eq!(
            "model:text_only:m.ckpt".parse::<RetrieverSpec>().unwrap(),
            RetrieverSpec::Model {
                mode: QueryMode::TextOnly,
                path: "m.ckpt".into()
            }
        );
        assert!("model:sideways:m".parse::<RetrieverSpec>().is_err());
        assert!("clip".parse::<RetrieverSpec>().is_err());
    }
}
