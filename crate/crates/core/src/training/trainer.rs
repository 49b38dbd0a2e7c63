use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::batch::{plan_batch, sample_graph};
use super::loss::batch_loss;
use super::{AdamW, Result, TrainConfig, TrainError};
use crate::datasets::{Corpus, Triplet};
use crate::model::CaseModel;
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
    pub seed: u64,
    pub samples: usize,
    pub batches: usize,
}

/// Optimizer state and shuffling stream carried across epochs.
pub struct Trainer {
    pub config: TrainConfig,
    pub optimizer: AdamW,
    pub epoch: usize,
    rng: SplitMix64,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: &CaseModel) -> Result<Self> {
        config.loss.validate()?;
        if config.batch_size == 0 {
            return Err(TrainError::Contract("batch_size must be positive".into()));
        }
        Ok(Self {
            optimizer: AdamW::new(config.optimizer.clone(), &model.params),
            rng: SplitMix64::new(config.seed),
            epoch: 0,
            config,
        })
    }

    /// One optimizer step on `batch`; returns the batch loss.
    pub fn step(&mut self, model: &mut CaseModel, batch: &[&Triplet], corpus: &Corpus, lr: f64) -> Result<f64> {
        let (loss, grads) = batch_gradients(model, batch, corpus, &self.config)?;
        self.optimizer.step(&mut model.params, &grads, lr)?;
        Ok(loss)
    }

    pub fn train_epoch(&mut self, model: &mut CaseModel, triplets: &[Triplet], corpus: &Corpus) -> Result<EpochReport> {
        if triplets.is_empty() {
            return Err(TrainError::Contract("cannot train on an empty dataset".into()));
        }
        let start = Instant::now();
        let lr = self.config.schedule.lr_at_epoch(self.epoch);
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        self.rng.shuffle(&mut order);
        let min_triplets = if self.config.rq_enabled { 1 } else { 2 };
        let (mut total, mut batches, mut samples) = (0.0, 0, 0);
        for chunk in order.chunks(self.config.batch_size) {
            if chunk.len() < min_triplets {
                continue;
            }
            let batch: Vec<&Triplet> = chunk.iter().map(|&i| &triplets[i]).collect();
            total += self.step(model, &batch, corpus, lr)?;
            batches += 1;
            samples += chunk.len();
        }
        if batches == 0 {
            return Err(TrainError::Contract("no batch has enough rows for in-batch negatives".into()));
        }
        let report = EpochReport {
            epoch: self.epoch,
            mean_loss: total / batches as f64,
            lr,
            wall_ms: start.elapsed().as_millis() as u64,
            seed: self.config.seed,
            samples,
            batches,
        };
        self.epoch += 1;
        Ok(report)
    }
}

/// Batch loss and its gradient for every parameter block (in block order),
/// as used by [`Trainer::step`].
pub fn batch_gradients(model: &CaseModel, batch: &[&Triplet], corpus: &Corpus, cfg: &TrainConfig) -> Result<(f64, Vec<Vec<f32>>)> {
    let plan = plan_batch(batch, corpus, cfg.rq_enabled, cfg.variant)?;
    let n = plan.samples.len();
    let rows = plan.rows();
    let d_e = model.config.d_e;

    let mut graphs = plan
        .samples
        .par_iter()
        .map(|s| sample_graph(model, s, cfg.rq_enabled, cfg.variant, true))
        .collect::<Result<Vec<_>>>()?;

    let mut q = Vec::with_capacity(rows * d_e);
    let mut t = Vec::with_capacity(rows * d_e);
    for sg in &graphs {
        q.extend_from_slice(sg.graph.tape.data(sg.fwd.0));
        t.extend_from_slice(sg.graph.tape.data(sg.fwd.1));
    }
    for sg in &graphs {
        if let Some((qv, tv)) = sg.rev {
            q.extend_from_slice(sg.graph.tape.data(qv));
            t.extend_from_slice(sg.graph.tape.data(tv));
        }
    }
    let mut tape = Tape::<f32>::new();
    let qv = tape.leaf(Tensor::new(vec![rows, d_e], q)?.with_grad());
    let tv = tape.leaf(Tensor::new(vec![rows, d_e], t)?.with_grad());
    let sim = tape.matmul_nt(qv, tv)?;
    let loss = batch_loss(&mut tape, sim, &plan.positives(), Some(&plan.ignore_mask()), &cfg.loss)?;
    let loss_value = tape.data(loss)[0] as f64;
    tape.backward(loss)?;
    let dq = tape.take_grad(qv).unwrap_or_else(|| vec![0.0; rows * d_e]);
    let dt = tape.take_grad(tv).unwrap_or_else(|| vec![0.0; rows * d_e]);
    let row = |m: &[f32], r: usize| m[r * d_e..(r + 1) * d_e].to_vec();

    let per_sample = graphs
        .par_iter_mut()
        .enumerate()
        .map(|(i, sg)| {
            let mut seeds = vec![(sg.fwd.0, row(&dq, i)), (sg.fwd.1, row(&dt, i))];
            if let Some((qv, tv)) = sg.rev {
                seeds.push((qv, row(&dq, n + i)));
                seeds.push((tv, row(&dt, n + i)));
            }
            sg.graph.tape.backward_from(&seeds)?;
            Ok(sg.graph.take_param_grads())
        })
        .collect::<Result<Vec<_>>>()?;
    drop(graphs);

    // summed in sample order
    let mut grads: Vec<Vec<f32>> = model.params.blocks().iter().map(|b| vec![0.0; b.tensor.numel()]).collect();
    for sample in per_sample {
        for (idx, g) in sample {
            for (acc, v) in grads[idx].iter_mut().zip(g) {
                *acc += v;
            }
        }
    }
    Ok((loss_value, grads))
}

/// A single epoch from a fresh optimizer state.
pub fn train_epoch(model: &mut CaseModel, triplets: &[Triplet], corpus: &Corpus, cfg: &TrainConfig) -> Result<EpochReport> {
    Trainer::new(cfg.clone(), model)?.train_epoch(model, triplets, corpus)
}

/// Runs `cfg.epochs` epochs, calling `on_epoch` after each.
pub fn fit(
    model: &mut CaseModel,
    triplets: &[Triplet],
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<Vec<EpochReport>> {
    let mut trainer = Trainer::new(cfg.clone(), model)?;
    let mut reports = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let r = trainer.train_epoch(model, triplets, corpus)?;
        on_epoch(&r);
        reports.push(r);
    }
    Ok(reports)
}
