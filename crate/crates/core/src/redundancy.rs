//! Modality-redundancy analysis: uni-modal Recall@K curves and sweeps over
//! purified query subsets V_n.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datasets::{Corpus, Triplet};
use crate::image::Image;
use crate::metrics::{self, EvalQuery, MetricsError, Pct, RecallAt, Result};
use crate::retrieval::EmbeddingIndex;

pub const DEFAULT_N_GRID: [usize; 8] = [0, 1, 2, 3, 5, 10, 20, 50];
pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 50];
pub const DEFAULT_CURVE_GRID: [usize; 9] = [1, 2, 5, 10, 20, 50, 100, 200, 500];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    TextOnly,
    ImageOnly,
    Reference,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::TextOnly => "text-only",
            Modality::ImageOnly => "image-only",
            Modality::Reference => "reference",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedundancyCurve {
    pub modality: Modality,
    pub points: Vec<RecallAt>,
}

impl RedundancyCurve {
    pub fn to_csv(curves: &[RedundancyCurve]) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["modality", "k", "recall"]).expect("in-memory write");
        for c in curves {
            for p in &c.points {
                w.write_record([c.modality.to_string(), p.k.to_string(), p.recall.to_string()])
                    .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }
}

/// Recall@K of `queries` against `index` at every K of `k_grid`.
pub fn unimodal_curve(
    queries: &[EvalQuery],
    index: &EmbeddingIndex,
    k_grid: &[usize],
    modality: Modality,
) -> Result<RedundancyCurve> {
    if k_grid.is_empty() || k_grid[0] == 0 || k_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MetricsError::Contract(format!("K grid must be strictly increasing and positive, got {k_grid:?}")));
    }
    let ranks = metrics::ranks(queries, index)?;
    let points = k_grid
        .iter()
        .map(|&k| {
            Ok(RecallAt {
                k,
                recall: Pct(metrics::recall_at_k(&ranks, k)?),
            })
        })
        .collect::<Result<_>>()?;
    Ok(RedundancyCurve { modality, points })
}

/// Query id to 1-based rank.
pub type RankMap = BTreeMap<String, usize>;

pub fn rank_map(queries: &[EvalQuery], index: &EmbeddingIndex) -> Result<RankMap> {
    let ranks = metrics::ranks(queries, index)?;
    let mut map = RankMap::new();
    for (q, r) in queries.iter().zip(ranks) {
        if map.insert(q.qid.clone(), r).is_some() {
            return Err(MetricsError::Contract(format!("duplicate query id {:?}", q.qid)));
        }
    }
    Ok(map)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PurifiedSubset {
    pub n: usize,
    pub retained: Vec<String>,
}

/// V_n: the queries whose filter rank exceeds `n`, in the order given.
pub fn purify(queries: &[String], filter_ranks: &RankMap, n: usize) -> Result<PurifiedSubset> {
    let mut retained = Vec::new();
    for q in queries {
        let r = filter_ranks
            .get(q)
            .ok_or_else(|| MetricsError::Contract(format!("query {q:?} has no filter rank")))?;
        if *r > n {
            retained.push(q.clone());
        }
    }
    Ok(PurifiedSubset { n, retained })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub subset_size: usize,
    /// Mean of the per-K recalls; absent when V_n is empty.
    pub avg_recall: Option<Pct>,
    pub recall: Vec<RecallAt>,
    pub empty: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub ks: Vec<usize>,
    pub rows: Vec<SweepRow>,
    /// Set when every V_n is empty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl Sweep {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("sweep serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["n".to_string(), "subset_size".into(), "avg_recall".into()];
        header.extend(self.ks.iter().map(|k| format!("recall@{k}")));
        w.write_record(&header).expect("in-memory write");
        for row in &self.rows {
            let mut rec = vec![
                row.n.to_string(),
                row.subset_size.to_string(),
                row.avg_recall.map(|p| p.to_string()).unwrap_or_default(),
            ];
            if row.empty {
                rec.resize(header.len(), String::new());
            } else {
                rec.extend(row.recall.iter().map(|r| r.recall.to_string()));
            }
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }
}

/// For each n: Recall@K under `method_ranks` on V_n (purified by
/// `filter_ranks`), and its mean over `ks`.
pub fn redundancy_sweep(method_ranks: &RankMap, filter_ranks: &RankMap, n_grid: &[usize], ks: &[usize]) -> Result<Sweep> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(MetricsError::Contract("K set must be non-empty and positive".into()));
    }
    if let Some(q) = method_ranks.keys().find(|q| !filter_ranks.contains_key(*q)) {
        return Err(MetricsError::Contract(format!("query {q:?} has no filter rank")));
    }
    if let Some(q) = filter_ranks.keys().find(|q| !method_ranks.contains_key(*q)) {
        return Err(MetricsError::Contract(format!("query {q:?} has no method rank")));
    }
    let queries: Vec<String> = method_ranks.keys().cloned().collect();
    let mut rows = Vec::with_capacity(n_grid.len());
    for &n in n_grid {
        let v = purify(&queries, filter_ranks, n)?;
        let ranks: Vec<usize> = v.retained.iter().map(|q| method_ranks[q]).collect();
        if ranks.is_empty() {
            rows.push(SweepRow {
                n,
                subset_size: 0,
                avg_recall: None,
                recall: Vec::new(),
                empty: true,
            });
            continue;
        }
        let recall = ks
            .iter()
            .map(|&k| {
                Ok(RecallAt {
                    k,
                    recall: Pct(metrics::recall_at_k(&ranks, k)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let avg = recall.iter().map(|r| r.recall.0).sum::<f64>() / recall.len() as f64;
        rows.push(SweepRow {
            n,
            subset_size: ranks.len(),
            avg_recall: Some(Pct(avg)),
            recall,
            empty: false,
        });
    }
    let warning = rows
        .iter()
        .all(|r| r.empty)
        .then(|| "degenerate sweep: every purified subset is empty".to_string());
    Ok(Sweep {
        ks: ks.to_vec(),
        rows,
        warning,
    })
}

/// Term-frequency vectors over a fixed vocabulary of lowercase words.
#[derive(Clone, Debug, PartialEq)]
pub struct BowEmbedder {
    vocab: BTreeMap<String, usize>,
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

impl BowEmbedder {
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut all: Vec<String> = texts.into_iter().flat_map(words).collect();
        all.sort_unstable();
        all.dedup();
        Self {
            vocab: all.into_iter().enumerate().map(|(i, w)| (w, i)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.vocab.len()
    }

    /// l2-normalized term frequencies; all zeros when no word is known.
    pub fn embed(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0.0f64; self.dim()];
        for w in words(text) {
            if let Some(&i) = self.vocab.get(&w) {
                v[i] += 1.0;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter()
            .map(|&x| if n > 0.0 { (x / n) as f32 } else { 0.0 })
            .collect()
    }
}

/// Channel means over a `grid`×`grid` partition of the image.
pub fn pixel_mean(image: &Image, grid: usize) -> Vec<f32> {
    let (h, w, c) = image.shape();
    let mut sums = vec![0.0f64; grid * grid * c];
    let mut counts = vec![0usize; grid * grid];
    for y in 0..h {
        for x in 0..w {
            let cell = (y * grid / h) * grid + x * grid / w;
            counts[cell] += 1;
            for (ch, &v) in image.pixel(y, x).iter().enumerate() {
                sums[cell * c + ch] += v as f64;
            }
        }
    }
    sums.iter()
        .enumerate()
        .map(|(i, s)| (s / counts[i / c].max(1) as f64) as f32)
        .collect()
}

/// Grid used by the bundled pixel embedder (48 dims on RGB input).
pub const PIXEL_GRID: usize = 4;

fn eval_query(t: &Triplet, embedding: Vec<f32>) -> EvalQuery {
    EvalQuery {
        qid: t.qid.clone(),
        embedding,
        target_id: t.target_image.clone(),
        category: t.category.clone(),
        subset: t.subset.clone(),
    }
}

/// Text-to-image filter: query texts against image captions, both as
/// bag-of-words vectors over their joint vocabulary.
pub fn bow_retriever<'a>(
    triplets: &[Triplet],
    captions: impl IntoIterator<Item = (&'a str, &'a str)>,
) -> Result<(Vec<EvalQuery>, EmbeddingIndex)> {
    let captions: Vec<(&str, &str)> = captions.into_iter().collect();
    let bow = BowEmbedder::fit(
        captions
            .iter()
            .map(|c| c.1)
            .chain(triplets.iter().map(|t| t.query_text.as_str())),
    );
    let index = EmbeddingIndex::build(captions.iter().map(|(id, c)| (id.to_string(), bow.embed(c))).collect())?;
    let queries = triplets.iter().map(|t| eval_query(t, bow.embed(&t.query_text))).collect();
    Ok((queries, index))
}

/// Image-to-image filter on [`pixel_mean`] features.
pub fn pixel_retriever(triplets: &[Triplet], corpus: &Corpus) -> Result<(Vec<EvalQuery>, EmbeddingIndex)> {
    let missing = corpus.missing(triplets);
    if !missing.is_empty() {
        return Err(MetricsError::Missing(missing));
    }
    let index = EmbeddingIndex::build(
        corpus
            .ids()
            .iter()
            .map(|id| (id.clone(), pixel_mean(corpus.get(id).expect("listed id"), PIXEL_GRID)))
            .collect(),
    )?;
    let queries = triplets
        .iter()
        .map(|t| eval_query(t, pixel_mean(corpus.get(&t.query_image).expect("checked above"), PIXEL_GRID)))
        .collect();
    Ok((queries, index))
}
