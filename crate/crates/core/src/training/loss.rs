//! Batch losses over a query×target similarity matrix.
//!
//! Row `i` of `sim` is query `i`; its positive is column `positives[i]`.
//! `ignore[i * cols + j] == true` drops column `j` from row `i`'s negatives
//! (used when another row's target is the same image as the positive).

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Scalar, Tape, TensorError, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    #[default]
    Surrogate,
    Contrastive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub ks: Vec<usize>,
    /// Rank sharpness.
    pub tau1: f64,
    /// Threshold sharpness.
    pub tau2: f64,
    pub variant: LossVariant,
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10, 50],
            tau1: 0.05,
            tau2: 0.25,
            variant: LossVariant::Surrogate,
            temperature: 0.07,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau1 > 0.0 && self.tau2 > 0.0) {
            return Err(TensorError::Contract("tau1 and tau2 must be positive".into()));
        }
        if self.ks.is_empty() || self.ks[0] == 0 || self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TensorError::Contract("ks must be positive and strictly increasing".into()));
        }
        if self.temperature <= 0.0 {
            return Err(TensorError::Contract("temperature must be positive".into()));
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check(rows: usize, cols: usize, sim: &[f64], positives: &[usize], ignore: Option<&[bool]>) -> Result<()> {
    if sim.len() != rows * cols || positives.len() != rows {
        return Err(TensorError::Shape {
            op: "loss",
            lhs: vec![rows, cols],
            rhs: vec![positives.len()],
        });
    }
    if let Some(m) = ignore {
        if m.len() != sim.len() {
            return Err(TensorError::Shape {
                op: "loss mask",
                lhs: vec![rows, cols],
                rhs: vec![m.len()],
            });
        }
    }
    if let Some(&p) = positives.iter().find(|&&p| p >= cols) {
        return Err(TensorError::Index {
            op: "loss positives",
            index: p,
            len: cols,
        });
    }
    if sim.iter().any(|v| v.is_nan()) {
        return Err(TensorError::NonFinite { op: "loss" });
    }
    Ok(())
}

fn is_negative(i: usize, j: usize, cols: usize, p: usize, ignore: Option<&[bool]>) -> bool {
    j != p && !ignore.is_some_and(|m| m[i * cols + j])
}

/// Smoothed `1 − mean Recall@K` and its gradient with respect to `sim`.
///
/// Soft rank `r = 1 + Σ_neg σ((s_ij − s_ip)/τ1)`, soft hit
/// `σ((k + ½ − r)/τ2)`. The half offset places the threshold between
/// ranks `k` and `k + 1`, so the sharp limit is exactly `[rank ≤ k]`.
pub fn recall_surrogate(
    sim: &[f64],
    rows: usize,
    cols: usize,
    positives: &[usize],
    ignore: Option<&[bool]>,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    check(rows, cols, sim, positives, ignore)?;
    cfg.validate()?;
    if rows < 1 || cols < 2 {
        return Err(TensorError::Contract("recall surrogate needs at least two targets".into()));
    }
    let norm = 1.0 / (rows * cfg.ks.len()) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; sim.len()];
    let mut sig = vec![0.0; cols];
    for i in 0..rows {
        let p = positives[i];
        let row = &sim[i * cols..(i + 1) * cols];
        let mut rank = 1.0;
        for j in 0..cols {
            sig[j] = if is_negative(i, j, cols, p, ignore) {
                sigmoid((row[j] - row[p]) / cfg.tau1)
            } else {
                0.0
            };
            rank += sig[j];
        }
        // d loss / d rank
        let mut d_rank = 0.0;
        for &k in &cfg.ks {
            let hit = sigmoid((k as f64 + 0.5 - rank) / cfg.tau2);
            total += hit;
            d_rank += norm * hit * (1.0 - hit) / cfg.tau2;
        }
        let g = &mut grad[i * cols..(i + 1) * cols];
        for j in 0..cols {
            let ds = d_rank * sig[j] * (1.0 - sig[j]) / cfg.tau1;
            g[j] += ds;
            g[p] -= ds;
        }
    }
    Ok((1.0 - total * norm, grad))
}

/// Mean cross-entropy of `softmax(sim / temperature)` against the positives.
pub fn info_nce(
    sim: &[f64],
    rows: usize,
    cols: usize,
    positives: &[usize],
    ignore: Option<&[bool]>,
    temperature: f64,
) -> Result<(f64, Vec<f64>)> {
    if temperature <= 0.0 {
        return Err(TensorError::Contract("temperature must be positive".into()));
    }
    check(rows, cols, sim, positives, ignore)?;
    if rows == 0 {
        return Err(TensorError::Contract("info_nce on an empty batch".into()));
    }
    let mut total = 0.0;
    let mut grad = vec![0.0; sim.len()];
    for i in 0..rows {
        let p = positives[i];
        let keep = |j: usize| j == p || is_negative(i, j, cols, p, ignore);
        let row = &sim[i * cols..(i + 1) * cols];
        let max = (0..cols)
            .filter(|&j| keep(j))
            .map(|j| row[j] / temperature)
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..cols)
            .filter(|&j| keep(j))
            .map(|j| (row[j] / temperature - max).exp())
            .sum();
        total += -(row[p] / temperature - max - z.ln());
        for j in (0..cols).filter(|&j| keep(j)) {
            let prob = (row[j] / temperature - max).exp() / z;
            let target = if j == p { 1.0 } else { 0.0 };
            grad[i * cols + j] = (prob - target) / temperature / rows as f64;
        }
    }
    Ok((total / rows as f64, grad))
}

/// Records the configured loss on `sim` (`[rows × cols]`) as a scalar node.
pub fn batch_loss<T: Scalar>(
    tape: &mut Tape<T>,
    sim: Var,
    positives: &[usize],
    ignore: Option<&[bool]>,
    cfg: &LossConfig,
) -> Result<Var> {
    let (rows, cols) = match tape.shape(sim) {
        [r, c] => (*r, *c),
        s => return Err(TensorError::Contract(format!("loss expects a matrix, got {s:?}"))),
    };
    let values: Vec<f64> = tape.data(sim).iter().map(|v| v.as_f64()).collect();
    let (loss, grad) = match cfg.variant {
        LossVariant::Surrogate => recall_surrogate(&values, rows, cols, positives, ignore, cfg)?,
        LossVariant::Contrastive => info_nce(&values, rows, cols, positives, ignore, cfg.temperature)?,
    };
    let grad: Vec<T> = grad.into_iter().map(T::of).collect();
    tape.custom(
        &[sim],
        vec![1],
        vec![T::of(loss)],
        Box::new(move |_, _, g| vec![grad.iter().map(|&d| d * g[0]).collect()]),
    )
}

/// Exact mean Recall@K (as a fraction) by full sort of each row, with ties
/// resolved against the positive.
pub fn exact_mean_recall(sim: &[f64], rows: usize, cols: usize, positives: &[usize], ks: &[usize]) -> f64 {
    let mut hits = 0usize;
    for i in 0..rows {
        let row = &sim[i * cols..(i + 1) * cols];
        let mut order: Vec<usize> = (0..cols).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then((a != positives[i]).cmp(&(b != positives[i]))));
        let rank = order.iter().position(|&j| j == positives[i]).unwrap() + 1;
        hits += ks.iter().filter(|&&k| rank <= k).count();
    }
    hits as f64 / (rows * ks.len()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::tensor::{finite_diff_check, Tensor};

    fn cfg(ks: &[usize], tau: f64) -> LossConfig {
        LossConfig {
            ks: ks.to_vec(),
            tau1: tau,
            tau2: tau,
            ..LossConfig::default()
        }
    }

    fn diagonal(b: usize, pos: f64, neg: f64) -> Vec<f64> {
        (0..b * b).map(|i| if i / b == i % b { pos } else { neg }).collect()
    }

    #[test]
    fn separated_and_inverted_batches() {
        let id: Vec<usize> = (0..4).collect();
        let (l, _) = recall_surrogate(&diagonal(4, 0.5, 0.0), 4, 4, &id, None, &cfg(&[1], 0.01)).unwrap();
        assert!(l < 0.01, "{l}");
        let (l, _) = recall_surrogate(&diagonal(4, 0.0, 0.5), 4, 4, &id, None, &cfg(&[1], 0.01)).unwrap();
        assert!(l > 0.99, "{l}");
        assert!(recall_surrogate(&[0.3], 1, 1, &[0], None, &cfg(&[1], 0.01)).is_err());
    }

    #[test]
    fn ignored_columns_are_not_negatives() {
        // column 1 scores above the positive but duplicates it
        let sim = [0.5, 0.9, 0.1];
        let mask = [false, true, false];
        let c = cfg(&[1], 0.01);
        let (masked, _) = recall_surrogate(&sim, 1, 3, &[0], Some(&mask), &c).unwrap();
        let (plain, _) = recall_surrogate(&sim, 1, 3, &[0], None, &c).unwrap();
        assert!(masked < 0.01 && plain > 0.99);
    }

    #[test]
    fn info_nce_closed_forms() {
        let (l, _) = info_nce(&diagonal(2, 1.0, 0.0), 2, 2, &[0, 1], None, 1.0).unwrap();
        assert!((l - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
        let (l, _) = info_nce(&[0.2; 25], 5, 5, &[0, 1, 2, 3, 4], None, 0.5).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        assert!(info_nce(&[0.2; 4], 2, 2, &[0, 1], None, 0.0).is_err());
    }

    #[test]
    fn info_nce_matches_scalar_recomputation() {
        let mut r = SplitMix64::new(21);
        let sim: Vec<f64> = (0..25).map(|_| r.uniform(-1.0, 1.0)).collect();
        let pos = [3, 0, 4, 1, 2];
        let t = 0.2;
        let mut want = 0.0;
        for i in 0..5 {
            let denom: f64 = (0..5).map(|j| (sim[i * 5 + j] / t).exp()).sum();
            want -= ((sim[i * 5 + pos[i]] / t).exp() / denom).ln();
        }
        let (l, _) = info_nce(&sim, 5, 5, &pos, None, t).unwrap();
        assert!((l - want / 5.0).abs() < 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for variant in [LossVariant::Surrogate, LossVariant::Contrastive] {
            for seed in 0..5 {
                let mut r = SplitMix64::new(seed);
                let b = 6;
                let sim = Tensor::new(vec![b, b], (0..b * b).map(|_| r.uniform(-1.0, 1.0)).collect()).unwrap();
                let pos: Vec<usize> = (0..b).map(|i| (i + seed as usize) % b).collect();
                let c = LossConfig {
                    ks: vec![1, 2, 4],
                    tau1: 0.3,
                    tau2: 0.5,
                    variant,
                    temperature: 0.3,
                };
                let rep = finite_diff_check(|t, x| batch_loss(t, x, &pos, None, &c), &sim, 1e-5).unwrap();
                assert!(rep.max_rel_err < 1e-4, "{variant:?} seed {seed}: {rep:?}");
            }
        }
    }

    #[test]
    fn sharp_limit_is_exact_recall() {
        let mut r = SplitMix64::new(4);
        let b = 6;
        let sim: Vec<f64> = (0..b * b).map(|_| r.uniform(-1.0, 1.0)).collect();
        let pos: Vec<usize> = (0..b).collect();
        let ks = [1, 2, 3];
        let (l, _) = recall_surrogate(&sim, b, b, &pos, None, &cfg(&ks, 1e-6)).unwrap();
        assert!((l - (1.0 - exact_mean_recall(&sim, b, b, &pos, &ks))).abs() < 1e-3);
    }
}
