use rayon::prelude::*;

use super::{Result, TrainError};
use crate::datasets::{Corpus, Triplet};
use crate::image::Image;
use crate::model::{CaseModel, Graph, Variant};
use crate::tensor::Var;

/// One triplet with its images resolved.
#[derive(Clone, Debug)]
pub struct Sample<'a> {
    pub qid: &'a str,
    pub text: &'a str,
    pub query_id: &'a str,
    pub query_image: &'a Image,
    pub target_id: &'a str,
    pub target_image: &'a Image,
}

/// Row layout of a batch: forward rows `0..n`, then (with reverse queries)
/// reverse rows `n..2n`. Row `i`'s positive is column `i`.
#[derive(Clone, Debug)]
pub struct BatchPlan<'a> {
    pub samples: Vec<Sample<'a>>,
    pub rq_enabled: bool,
    pub variant: Variant,
}

pub fn plan_batch<'a>(triplets: &[&'a Triplet], corpus: &'a Corpus, rq_enabled: bool, variant: Variant) -> Result<BatchPlan<'a>> {
    let get = |t: &Triplet, id: &'a str| {
        corpus.get(id).ok_or_else(|| TrainError::MissingImage {
            qid: t.qid.clone(),
            image: id.to_string(),
        })
    };
    let samples = triplets
        .iter()
        .map(|&t| {
            Ok(Sample {
                qid: &t.qid,
                text: &t.query_text,
                query_id: &t.query_image,
                query_image: get(t, &t.query_image)?,
                target_id: &t.target_image,
                target_image: get(t, &t.target_image)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchPlan {
        samples,
        rq_enabled,
        variant,
    })
}

impl BatchPlan<'_> {
    pub fn rows(&self) -> usize {
        self.samples.len() * if self.rq_enabled { 2 } else { 1 }
    }

    pub fn is_reverse(&self, row: usize) -> bool {
        row >= self.samples.len()
    }

    /// Image id of each row's positive target.
    pub fn target_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.samples.iter().map(|s| s.target_id).collect();
        if self.rq_enabled {
            ids.extend(self.samples.iter().map(|s| s.query_id));
        }
        ids
    }

    pub fn positives(&self) -> Vec<usize> {
        (0..self.rows()).collect()
    }

    /// `ignore[i * rows + j]`: column `j` shows the same image as row `i`'s
    /// positive and is not a negative for it.
    pub fn ignore_mask(&self) -> Vec<bool> {
        let ids = self.target_ids();
        let n = ids.len();
        let mut mask = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                mask[i * n + j] = j != i && ids[j] == ids[i];
            }
        }
        mask
    }
}

/// Graph for one sample: forward query and target, and optionally the
/// reverse query and its target (the query image). Each image passes the
/// image encoder once.
pub(crate) struct SampleGraph<'m> {
    pub graph: Graph<'m, f32>,
    pub fwd: (Var, Var),
    pub rev: Option<(Var, Var)>,
}

pub(crate) fn sample_graph<'m>(
    model: &'m CaseModel,
    s: &Sample<'_>,
    rq_enabled: bool,
    variant: Variant,
    track: bool,
) -> Result<SampleGraph<'m>> {
    let mut g = Graph::new(model, track);
    let vq = g.encode_image(s.query_image)?;
    let vt = g.encode_image(s.target_image)?;
    let zero = if variant == Variant::TextOnly {
        Some(g.encode_image(&model.zero_image())?)
    } else {
        None
    };
    let ids = model.query_tokens(s.text, variant, false);
    let q = g.query_embedding(&ids, zero.unwrap_or(vq))?;
    let t = g.target_embedding(vt)?;
    let rev = if rq_enabled {
        let ids = model.query_tokens(s.text, variant, true);
        let q = g.query_embedding(&ids, zero.unwrap_or(vt))?;
        let t = g.target_embedding(vq)?;
        Some((q, t))
    } else {
        None
    };
    Ok(SampleGraph {
        graph: g,
        fwd: (q, t),
        rev,
    })
}

/// Query and target embeddings of a batch, row-aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub queries: Vec<Vec<f32>>,
    pub targets: Vec<Vec<f32>>,
    pub positives: Vec<usize>,
    pub reverse: Vec<bool>,
    pub target_ids: Vec<String>,
}

/// Embeds a batch without recording gradients.
pub fn build_batch(model: &CaseModel, triplets: &[&Triplet], corpus: &Corpus, rq_enabled: bool, variant: Variant) -> Result<Batch> {
    let plan = plan_batch(triplets, corpus, rq_enabled, variant)?;
    let graphs = plan
        .samples
        .par_iter()
        .map(|s| sample_graph(model, s, rq_enabled, variant, false))
        .collect::<Result<Vec<_>>>()?;
    let data = |sg: &SampleGraph, v: Var| sg.graph.tape.data(v).to_vec();
    let mut queries: Vec<Vec<f32>> = graphs.iter().map(|sg| data(sg, sg.fwd.0)).collect();
    let mut targets: Vec<Vec<f32>> = graphs.iter().map(|sg| data(sg, sg.fwd.1)).collect();
    for sg in &graphs {
        if let Some((q, t)) = sg.rev {
            queries.push(data(sg, q));
            targets.push(data(sg, t));
        }
    }
    Ok(Batch {
        queries,
        targets,
        positives: plan.positives(),
        reverse: (0..plan.rows()).map(|r| plan.is_reverse(r)).collect(),
        target_ids: plan.target_ids().into_iter().map(String::from).collect(),
    })
}
