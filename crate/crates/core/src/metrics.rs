//! Recall@K, subset Recall@K and evaluation reports.

use std::fmt;

use rayon::prelude::*;
use serde::de::Deserializer;
use serde::ser::{Error as _, Serializer};
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use thiserror::Error;

use crate::datasets::{Corpus, Triplet};
use crate::model::{CaseModel, ModelError, QueryMode};
use crate::retrieval::{EmbeddingIndex, RetrievalError};
use crate::tensor::dot_f64;

/// Candidates per subset in the CIRR protocol.
pub const SUBSET_SIZE: usize = 6;
pub const SUBSET_KS: [usize; 3] = [1, 2, 3];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{0}")]
    Contract(String),
    #[error("targets missing from the corpus: {}", .0.join(", "))]
    Missing(Vec<String>),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Percentage of `ranks` that are at most `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(MetricsError::Contract("recall over an empty rank list".into()));
    }
    if ranks.contains(&0) {
        return Err(MetricsError::Contract("ranks are 1-based".into()));
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(100.0 * hits as f64 / ranks.len() as f64)
}

/// 1-based rank of `target_id` among the subset candidates by cosine;
/// ties go to the earlier candidate.
pub fn subset_rank(query: &[f32], subset: &[(&str, &[f32])], target_id: &str) -> Result<usize> {
    if subset.len() != SUBSET_SIZE {
        return Err(MetricsError::Contract(format!(
            "subset has {} candidates, expected {SUBSET_SIZE}",
            subset.len()
        )));
    }
    let t = subset
        .iter()
        .position(|(id, _)| *id == target_id)
        .ok_or_else(|| MetricsError::Contract(format!("target {target_id:?} is not in the subset")))?;
    let cos = |v: &[f32]| -> Result<f64> {
        if v.len() != query.len() {
            return Err(RetrievalError::Dim {
                expected: query.len(),
                got: v.len(),
            }
            .into());
        }
        let n = dot_f64(v, v).sqrt();
        Ok(if n > 0.0 { dot_f64(query, v) / n } else { 0.0 })
    };
    let target = cos(subset[t].1)?;
    let mut ahead = 0;
    for (i, (_, v)) in subset.iter().enumerate() {
        let s = cos(v)?;
        if s > target || (s == target && i < t) {
            ahead += 1;
        }
    }
    Ok(ahead + 1)
}

pub fn subset_recall_at_k(query: &[f32], subset: &[(&str, &[f32])], target_id: &str, k: usize) -> Result<bool> {
    Ok(subset_rank(query, subset, target_id)? <= k)
}

/// A percentage that serializes with two fixed decimals.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Pct(pub f64);

impl fmt::Display for Pct {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}", self.0)
    }
}

impl Serialize for Pct {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RawValue::from_string(self.to_string())
            .map_err(S::Error::custom)?
            .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pct {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        f64::deserialize(d).map(Pct)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallAt {
    pub k: usize,
    pub recall: Pct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: String,
    pub queries: usize,
    pub recall: Vec<RecallAt>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub queries: usize,
    pub corpus_size: usize,
    pub recall: Vec<RecallAt>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_recall: Option<Vec<RecallAt>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<CategoryReport>,
    /// Unweighted mean over categories.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_average: Option<Vec<RecallAt>>,
}

impl EvalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|r| r.k == k).map(|r| r.recall.0)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One row per scope (`all`, each category, `average`), one column per K.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["scope".to_string(), "queries".to_string()];
        header.extend(self.recall.iter().map(|r| format!("R@{}", r.k)));
        let subset = self.subset_recall.as_deref().unwrap_or(&[]);
        header.extend(subset.iter().map(|r| format!("Rsubset@{}", r.k)));
        w.write_record(&header).expect("in-memory write");
        let row = |scope: &str, n: String, rs: &[RecallAt], sub: &[RecallAt]| {
            let mut v = vec![scope.to_string(), n];
            v.extend(rs.iter().map(|r| r.recall.to_string()));
            v.extend(sub.iter().map(|r| r.recall.to_string()));
            v.resize(header.len(), String::new());
            v
        };
        w.write_record(row("all", self.queries.to_string(), &self.recall, subset))
            .expect("in-memory write");
        for c in &self.categories {
            w.write_record(row(&c.category, c.queries.to_string(), &c.recall, &[]))
                .expect("in-memory write");
        }
        if let Some(avg) = &self.category_average {
            w.write_record(row("average", String::new(), avg, &[]))
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }
}

/// An embedded query ready for ranking.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalQuery {
    pub qid: String,
    pub embedding: Vec<f32>,
    pub target_id: String,
    pub category: Option<String>,
    pub subset: Option<Vec<String>>,
}

fn curve(ranks: &[usize], ks: &[usize]) -> Result<Vec<RecallAt>> {
    ks.iter()
        .map(|&k| {
            Ok(RecallAt {
                k,
                recall: Pct(recall_at_k(ranks, k)?),
            })
        })
        .collect()
}

fn check_ks(ks: &[usize]) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MetricsError::Contract(format!(
            "K set must be non-empty, positive and strictly increasing, got {ks:?}"
        )));
    }
    Ok(())
}

/// Ranks of every query's target in `index`, in query order.
pub fn ranks(queries: &[EvalQuery], index: &EmbeddingIndex) -> Result<Vec<usize>> {
    let missing: Vec<String> = queries
        .iter()
        .filter(|q| index.position(&q.target_id).is_none())
        .map(|q| q.target_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(MetricsError::Missing(missing));
    }
    Ok(queries
        .par_iter()
        .map(|q| index.rank_of(&q.embedding, &q.target_id))
        .collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Recall@K over all queries, per category, and (when every query carries
/// a subset) subset Recall@{1,2,3}.
pub fn evaluate(queries: &[EvalQuery], index: &EmbeddingIndex, ks: &[usize]) -> Result<EvalReport> {
    check_ks(ks)?;
    let ranks = ranks(queries, index)?;
    let recall = curve(&ranks, ks)?;

    let mut names: Vec<&str> = queries.iter().filter_map(|q| q.category.as_deref()).collect();
    names.sort_unstable();
    names.dedup();
    let mut categories = Vec::with_capacity(names.len());
    for name in names {
        let r: Vec<usize> = queries
            .iter()
            .zip(&ranks)
            .filter(|(q, _)| q.category.as_deref() == Some(name))
            .map(|(_, &r)| r)
            .collect();
        categories.push(CategoryReport {
            category: name.to_string(),
            queries: r.len(),
            recall: curve(&r, ks)?,
        });
    }
    let category_average = (!categories.is_empty()).then(|| {
        ks.iter()
            .enumerate()
            .map(|(i, &k)| RecallAt {
                k,
                recall: Pct(categories.iter().map(|c| c.recall[i].recall.0).sum::<f64>() / categories.len() as f64),
            })
            .collect()
    });

    let subset_recall = if !queries.is_empty() && queries.iter().all(|q| q.subset.is_some()) {
        let sranks = queries
            .par_iter()
            .map(|q| {
                let members = q.subset.as_ref().expect("checked above");
                let cands = members
                    .iter()
                    .map(|id| {
                        index
                            .vector(id)
                            .map(|v| (id.as_str(), v))
                            .ok_or_else(|| MetricsError::Missing(vec![id.clone()]))
                    })
                    .collect::<Result<Vec<_>>>()?;
                subset_rank(&q.embedding, &cands, &q.target_id)
            })
            .collect::<Result<Vec<_>>>()?;
        Some(curve(&sranks, &SUBSET_KS)?)
    } else {
        None
    };

    Ok(EvalReport {
        queries: queries.len(),
        corpus_size: index.len(),
        recall,
        subset_recall,
        categories,
        category_average,
    })
}

/// Target embeddings of every corpus image, in corpus order.
pub fn embed_corpus(model: &CaseModel, corpus: &Corpus) -> Result<EmbeddingIndex> {
    let entries = corpus
        .ids()
        .par_iter()
        .map(|id| {
            let img = corpus.get(id).expect("id listed by corpus");
            Ok((id.clone(), model.encode_target(img)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EmbeddingIndex::build(entries)?)
}

pub fn embed_queries(model: &CaseModel, triplets: &[Triplet], corpus: &Corpus, mode: QueryMode) -> Result<Vec<EvalQuery>> {
    let missing = corpus.missing(triplets);
    if !missing.is_empty() {
        return Err(MetricsError::Missing(missing));
    }
    triplets
        .par_iter()
        .map(|t| {
            let img = corpus.get(&t.query_image).expect("checked above");
            Ok(EvalQuery {
                qid: t.qid.clone(),
                embedding: model.forward_query(img, &t.query_text, mode)?,
                target_id: t.target_image.clone(),
                category: t.category.clone(),
                subset: t.subset.clone(),
            })
        })
        .collect()
}

/// Embeds `corpus` and `triplets` with `model` and evaluates.
pub fn evaluate_model(
    model: &CaseModel,
    triplets: &[Triplet],
    corpus: &Corpus,
    mode: QueryMode,
    ks: &[usize],
) -> Result<EvalReport> {
    let index = embed_corpus(model, corpus)?;
    let queries = embed_queries(model, triplets, corpus, mode)?;
    evaluate(&queries, &index, ks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn q(qid: &str, e: Vec<f32>, target: &str, cat: Option<&str>) -> EvalQuery {
        EvalQuery {
            qid: qid.into(),
            embedding: e,
            target_id: target.into(),
            category: cat.map(String::from),
            subset: None,
        }
    }

    #[test]
    fn recall_examples() {
        assert!((recall_at_k(&[1, 3, 7], 5).unwrap() - 66.666_666).abs() < 1e-4);
        assert_eq!(recall_at_k(&[4, 2, 9], 9).unwrap(), 100.0);
        assert!(matches!(recall_at_k(&[], 1), Err(MetricsError::Contract(_))));
        assert!(recall_at_k(&[0], 1).is_err());
    }

    #[test]
    fn subset_hand_ordered() {
        let vs: Vec<Vec<f32>> = [[1.0, 0.0], [0.6, 0.8], [0.0, 1.0], [0.8, 0.6], [-1.0, 0.0], [0.8, 0.6]]
            .iter()
            .map(|v| v.to_vec())
            .collect();
        let names = ["a", "b", "c", "d", "e", "f"];
        let subset: Vec<(&str, &[f32])> = names.iter().zip(&vs).map(|(n, v)| (*n, v.as_slice())).collect();
        let query = [1.0f32, 0.0];
        // cosines: a 1.0, d 0.8, f 0.8, b 0.6, c 0.0, e -1.0
        for (id, rank) in [("a", 1), ("d", 2), ("f", 3), ("b", 4), ("c", 5), ("e", 6)] {
            assert_eq!(subset_rank(&query, &subset, id).unwrap(), rank, "{id}");
        }
        assert!(subset_recall_at_k(&query, &subset, "a", 1).unwrap());
        assert!(!subset_recall_at_k(&query, &subset, "b", 3).unwrap());
        assert!(subset_rank(&query, &subset, "z").is_err());
        assert!(subset_rank(&query, &subset[..5], "a").is_err());
    }

    #[test]
    fn query_equal_to_target_hits_at_one() {
        let idx = EmbeddingIndex::build(vec![("x".into(), vec![0.3, 0.4]), ("y".into(), vec![1.0, 0.0])]).unwrap();
        let r = evaluate(&[q("0", vec![0.6, 0.8], "x", None)], &idx, &[1, 5]).unwrap();
        assert_eq!(r.recall(1), Some(100.0));
        assert_eq!(r.corpus_size, 2);
    }

    #[test]
    fn category_average_is_unweighted() {
        // cat a: 5 queries, 2 hit at 1 -> 40; cat b: 5 queries, 3 hit -> 60
        let idx = EmbeddingIndex::build(vec![("hit".into(), vec![1.0, 0.0]), ("miss".into(), vec![0.0, 1.0])]).unwrap();
        let mut qs = Vec::new();
        for i in 0..5 {
            qs.push(q(&format!("a{i}"), vec![1.0, 0.0], if i < 2 { "hit" } else { "miss" }, Some("a")));
        }
        for i in 0..5 {
            qs.push(q(&format!("b{i}"), vec![1.0, 0.0], if i < 3 { "hit" } else { "miss" }, Some("b")));
        }
        qs.push(q("extra", vec![1.0, 0.0], "hit", Some("b")));
        let r = evaluate(&qs, &idx, &[1]).unwrap();
        let b = 100.0 * 4.0 / 6.0;
        assert_eq!(r.categories[0].recall[0].recall.0, 40.0);
        assert!((r.categories[1].recall[0].recall.0 - b).abs() < 1e-12);
        let avg = r.category_average.as_ref().unwrap()[0].recall.0;
        assert!((avg - (40.0 + b) / 2.0).abs() < 1e-12);
        assert!(r.to_json().contains("\"recall\": 53.33"));
        let csv = r.to_csv();
        assert!(csv.starts_with("scope,queries,R@1\nall,11,54.55\na,5,40.00\nb,6,66.67\naverage,,53.33\n"), "{csv}");
    }

    #[test]
    fn missing_targets_are_listed() {
        let idx = EmbeddingIndex::build(vec![("x".into(), vec![1.0])]).unwrap();
        let qs = [q("0", vec![1.0], "gone", None), q("1", vec![1.0], "lost", None)];
        match evaluate(&qs, &idx, &[1]) {
            Err(MetricsError::Missing(ids)) => assert_eq!(ids, ["gone", "lost"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn report_json_has_two_decimals_and_roundtrips() {
        let idx = EmbeddingIndex::build(vec![("x".into(), vec![1.0, 0.0]), ("y".into(), vec![0.0, 1.0])]).unwrap();
        let qs = [q("0", vec![1.0, 0.0], "x", None), q("1", vec![1.0, 0.0], "y", None), q("2", vec![0.0, 1.0], "y", None)];
        let r = evaluate(&qs, &idx, &[1, 2]).unwrap();
        let json = r.to_json();
        assert!(json.contains("\"recall\": 66.67"), "{json}");
        assert!(json.contains("\"recall\": 100.00"), "{json}");
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.recall(2), Some(100.0));
        assert_eq!(evaluate(&qs, &idx, &[1, 2]).unwrap().to_json(), json);
    }

    #[test]
    fn subset_with_k_equal_six_always_hits() {
        let mut rng = SplitMix64::new(5);
        for _ in 0..50 {
            let vs: Vec<Vec<f32>> = (0..6).map(|_| (0..4).map(|_| rng.normal() as f32).collect()).collect();
            let ids: Vec<String> = (0..6).map(|i| format!("c{i}")).collect();
            let subset: Vec<(&str, &[f32])> = ids.iter().zip(&vs).map(|(n, v)| (n.as_str(), v.as_slice())).collect();
            let query: Vec<f32> = (0..4).map(|_| rng.normal() as f32).collect();
            let t = &ids[rng.index(6)];
            assert!(subset_recall_at_k(&query, &subset, t, 6).unwrap());
        }
    }

    #[test]
    fn bad_k_sets_are_rejected() {
        let idx = EmbeddingIndex::build(vec![("x".into(), vec![1.0])]).unwrap();
        let qs = [q("0", vec![1.0], "x", None)];
        for ks in [&[][..], &[0], &[5, 1], &[1, 1]] {
            assert!(matches!(evaluate(&qs, &idx, ks), Err(MetricsError::Contract(_))));
        }
    }

    proptest! {
        #[test]
        fn recall_monotone_and_full_at_corpus_size(ranks in prop::collection::vec(1usize..50, 1..40)) {
            let mut prev = 0.0;
            for k in 1..=50 {
                let r = recall_at_k(&ranks, k).unwrap();
                prop_assert!((0.0..=100.0).contains(&r));
                prop_assert!(r >= prev);
                prev = r;
            }
            prop_assert_eq!(recall_at_k(&ranks, 50).unwrap(), 100.0);
        }
    }
}
