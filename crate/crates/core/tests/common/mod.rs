#![allow(dead_code)]

use coir_core::datasets::{Corpus, Triplet};
use coir_core::image::Image;
use coir_core::model::{cross_attention, CaseModel, Graph, ModelConfig, ModelError, Tokenizer, Variant};
use coir_core::rng::SplitMix64;
use coir_core::tensor::{
    compare_grads, finite_diff_check, finite_diff_check_f32, numeric_grad, FdReport, Scalar, Tape, Tensor, TensorError,
    Var,
};
use coir_core::training::{batch_gradients, batch_loss, plan_batch, LossConfig, LossVariant, TrainConfig};

type TResult<T> = Result<T, TensorError>;

pub const OPS: &[&str] = &[
    "matmul",
    "matmul_nt",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "add_row",
    "gelu",
    "softmax_rows",
    "layer_norm",
    "l2_normalize",
    "embedding",
    "slice_cols",
    "concat_cols",
    "concat_rows",
    "select_rows",
    "extract",
    "reshape",
    "sum",
    "cross_attention",
    "recall_surrogate",
    "info_nce",
];

/// Random sizes for one op instance.
#[derive(Clone, Copy, Debug)]
pub struct Dims {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub heads: usize,
}

impl Dims {
    pub fn draw(r: &mut SplitMix64) -> Self {
        let heads = 1 + r.index(2);
        Self {
            m: 1 + r.index(4),
            k: 2 + r.index(4),
            n: heads * (1 + r.index(3)),
            heads,
        }
    }
}

/// Shapes of the differentiable inputs of `op`, packed one after another
/// into the checked leaf.
pub fn input_shapes(op: &str, d: Dims) -> Vec<Vec<usize>> {
    let Dims { m, k, n, .. } = d;
    match op {
        "matmul" => vec![vec![m, k], vec![k, n]],
        "matmul_nt" => vec![vec![m, k], vec![n, k]],
        "add" | "sub" | "mul" => vec![vec![m, n], vec![m, n]],
        "add_row" => vec![vec![m, n], vec![n]],
        "layer_norm" => vec![vec![m, k], vec![k], vec![k]],
        "embedding" => vec![vec![k + 1, n]],
        "concat_cols" => vec![vec![m, k], vec![m, n]],
        "concat_rows" => vec![vec![m, n], vec![k, n]],
        "cross_attention" => vec![vec![m, n], vec![k, n], vec![k, n]],
        "recall_surrogate" | "info_nce" => vec![vec![k, k]],
        _ => vec![vec![m, k]],
    }
}

/// A fixed pseudo-random weight per output coordinate, so the scalar
/// objective depends on every output in a different way.
fn weights<T: Scalar>(len: usize, salt: u64) -> Vec<T> {
    let mut r = SplitMix64::new(salt ^ 0x5eed);
    (0..len).map(|_| T::of(r.uniform(-1.0, 1.0))).collect()
}

fn weighted_sum<T: Scalar>(tape: &mut Tape<T>, y: Var, salt: u64) -> TResult<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(shape.clone(), weights(shape.iter().product(), salt))?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// `Σ w ⊙ op(inputs)` with every input sliced out of the leaf `x`.
pub fn op_objective<T: Scalar>(op: &str, d: Dims, tape: &mut Tape<T>, x: Var) -> TResult<Var> {
    let shapes = input_shapes(op, d);
    let mut ins = Vec::new();
    let mut offset = 0;
    for s in &shapes {
        ins.push(tape.extract(x, offset, s)?);
        offset += s.iter().product::<usize>();
    }
    let Dims { m, k, n, heads } = d;
    let y = match op {
        "matmul" => tape.matmul(ins[0], ins[1])?,
        "matmul_nt" => tape.matmul_nt(ins[0], ins[1])?,
        "transpose" => tape.transpose(ins[0])?,
        "add" => tape.add(ins[0], ins[1])?,
        "sub" => tape.sub(ins[0], ins[1])?,
        "mul" => tape.mul(ins[0], ins[1])?,
        "scale" => tape.scale(ins[0], -1.7)?,
        "add_row" => tape.add_row(ins[0], ins[1])?,
        "gelu" => tape.gelu(ins[0])?,
        "softmax_rows" => tape.softmax_rows(ins[0])?,
        "layer_norm" => tape.layer_norm(ins[0], ins[1], ins[2], 1e-5)?,
        "l2_normalize" => tape.l2_normalize(ins[0])?,
        "embedding" => {
            let ids: Vec<usize> = (0..m + 2).map(|i| (i * 7 + 1) % (k + 1)).collect();
            tape.embedding(ins[0], &ids)?
        }
        "slice_cols" => tape.slice_cols(ins[0], k / 2, k - k / 2)?,
        "concat_cols" | "concat_rows" => {
            if op == "concat_cols" {
                tape.concat_cols(&[ins[0], ins[1]])?
            } else {
                tape.concat_rows(&[ins[0], ins[1]])?
            }
        }
        "select_rows" => {
            let rows: Vec<usize> = (0..m + 2).map(|i| (i * 3) % m).collect();
            tape.select_rows(ins[0], &rows)?
        }
        "extract" => tape.extract(ins[0], 1, &[m * k - 1])?,
        "reshape" => tape.reshape(ins[0], &[k, m])?,
        "sum" => tape.sum(ins[0])?,
        "cross_attention" => cross_attention(tape, ins[0], ins[1], ins[2], heads)?,
        "recall_surrogate" | "info_nce" => {
            let cfg = LossConfig {
                variant: if op == "info_nce" {
                    LossVariant::Contrastive
                } else {
                    LossVariant::Surrogate
                },
                // wide enough that the sigmoids are not saturated on unit-scale scores
                tau1: 0.5,
                tau2: 1.0,
                ks: vec![1, 2],
                ..LossConfig::default()
            };
            let positives: Vec<usize> = (0..k).collect();
            let mut ignore = vec![false; k * k];
            if k > 2 {
                ignore[1] = true;
            }
            return batch_loss(tape, ins[0], &positives, Some(&ignore), &cfg);
        }
        other => panic!("unknown op {other}"),
    };
    weighted_sum(tape, y, (m * 31 + k * 7 + n) as u64)
}

pub fn op_input(op: &str, d: Dims, r: &mut SplitMix64) -> Tensor<f64> {
    let len: usize = input_shapes(op, d).iter().map(|s| s.iter().product::<usize>()).sum();
    let data = (0..len)
        .map(|_| match op {
            // spread the entries so no two scores are close to a tie
            "recall_surrogate" | "info_nce" => r.uniform(-2.0, 2.0),
            _ => r.normal(),
        })
        .collect();
    Tensor::new(vec![len], data).unwrap()
}

/// (f64 report, f32-vs-f64 report) for one random instance of `op`.
pub fn check_op(op: &str, seed: u64) -> (FdReport, FdReport) {
    let mut r = SplitMix64::new(seed * 1000 + OPS.iter().position(|o| *o == op).unwrap() as u64);
    let d = Dims::draw(&mut r);
    let x = op_input(op, d, &mut r);
    let f64_rep = finite_diff_check(|t: &mut Tape<f64>, v| op_objective(op, d, t, v), &x, 1e-6).unwrap();
    let f32_rep = finite_diff_check_f32(
        |t: &mut Tape<f32>, v| op_objective(op, d, t, v),
        |t: &mut Tape<f64>, v| op_objective(op, d, t, v),
        &x.cast::<f32>(),
        1e-6,
    )
    .unwrap();
    (f64_rep, f32_rep)
}

// ── full model loss ─────────────────────────────────────────────────

pub fn tiny_model(seed: u64) -> CaseModel {
    let tok = Tokenizer::from_corpus(["make the sky cloudy", "add a red disc", "remove the blue frame"]);
    let cfg = ModelConfig {
        image_size: 16,
        patch_size: 8,
        d: 8,
        n_heads: 2,
        vit_layers: 1,
        shift_layers: 1,
        d_e: 8,
        max_text_len: 10,
        init_seed: seed,
        ..ModelConfig::default()
    };
    CaseModel::new(cfg, tok).unwrap()
}

pub fn random_image(r: &mut SplitMix64, size: usize) -> Image {
    let mut img = Image::zeros(size, size, 3);
    for v in &mut img.data {
        *v = r.next_f64() as f32;
    }
    img
}

/// Three triplets over five random images; two share a target.
pub fn loss_fixture(seed: u64) -> (Vec<Triplet>, Corpus) {
    let mut r = SplitMix64::new(seed + 77);
    let mut corpus = Corpus::default();
    for i in 0..5 {
        corpus.insert(format!("i{i}"), random_image(&mut r, 16));
    }
    let t = |q: &str, text: &str, tgt: &str| Triplet {
        qid: format!("{q}-{tgt}"),
        query_image: q.into(),
        query_text: text.into(),
        target_image: tgt.into(),
        subset: None,
        category: None,
        caption: None,
    };
    let triplets = vec![
        t("i0", "make the sky cloudy", "i1"),
        t("i2", "add a red disc", "i3"),
        t("i4", "remove the blue frame", "i1"),
    ];
    (triplets, corpus)
}

/// The batch loss of the trainer rebuilt as a single graph over the flat
/// parameter vector.
pub fn full_loss<T: Scalar>(
    model: &CaseModel,
    triplets: &[&Triplet],
    corpus: &Corpus,
    cfg: &TrainConfig,
    tape: &mut Tape<T>,
    flat: Var,
) -> TResult<Var> {
    let wrap = |e: ModelError| TensorError::Contract(e.to_string());
    let plan = plan_batch(triplets, corpus, cfg.rq_enabled, cfg.variant).map_err(|e| TensorError::Contract(e.to_string()))?;
    let mut g = Graph::over_flat(model, std::mem::take(tape), flat).map_err(wrap)?;
    let (mut qs, mut ts, mut rq, mut rt) = (vec![], vec![], vec![], vec![]);
    for s in &plan.samples {
        let vq = g.encode_image(s.query_image).map_err(wrap)?;
        let vt = g.encode_image(s.target_image).map_err(wrap)?;
        let zero = match cfg.variant {
            Variant::TextOnly => Some(g.encode_image(&model.zero_image()).map_err(wrap)?),
            _ => None,
        };
        let ids = model.query_tokens(s.text, cfg.variant, false);
        qs.push(g.query_embedding(&ids, zero.unwrap_or(vq)).map_err(wrap)?);
        ts.push(g.target_embedding(vt).map_err(wrap)?);
        if cfg.rq_enabled {
            let ids = model.query_tokens(s.text, cfg.variant, true);
            rq.push(g.query_embedding(&ids, zero.unwrap_or(vt)).map_err(wrap)?);
            rt.push(g.target_embedding(vq).map_err(wrap)?);
        }
    }
    qs.extend(rq);
    ts.extend(rt);
    let q = g.tape.concat_rows(&qs)?;
    let t = g.tape.concat_rows(&ts)?;
    let sim = g.tape.matmul_nt(q, t)?;
    let loss = batch_loss(&mut g.tape, sim, &plan.positives(), Some(&plan.ignore_mask()), &cfg.loss)?;
    *tape = g.into_tape();
    Ok(loss)
}

pub fn loss_config(seed: u64) -> TrainConfig {
    let variant = match seed % 3 {
        0 => Variant::Full,
        1 => Variant::TextOnly,
        _ => Variant::ImageOnly,
    };
    let mut cfg = TrainConfig {
        rq_enabled: seed.is_multiple_of(2),
        variant,
        ..TrainConfig::default()
    };
    if seed % 4 == 3 {
        cfg.loss.variant = LossVariant::Contrastive;
    }
    cfg
}

/// (f64 single-graph check, trainer's f32 gradients against f64 central
/// differences) for the full toy loss.
pub fn check_full_loss(seed: u64) -> (FdReport, FdReport) {
    let model = tiny_model(seed);
    let (triplets, corpus) = loss_fixture(seed);
    let refs: Vec<&Triplet> = triplets.iter().collect();
    let cfg = loss_config(seed);
    let flat64: Tensor<f64> = Tensor::vector(model.params.flatten().iter().map(|&v| v as f64).collect());
    let f = |t: &mut Tape<f64>, v: Var| full_loss(&model, &refs, &corpus, &cfg, t, v);
    let numeric = numeric_grad(&f, &flat64, 1e-5).unwrap();

    let mut tape = Tape::new();
    let leaf = tape.leaf(flat64.clone().with_grad());
    let loss = f(&mut tape, leaf).unwrap();
    tape.backward(loss).unwrap();
    let analytic64 = tape.grad(leaf).unwrap().to_vec();
    let rep64 = compare_grads(&analytic64, &numeric);

    let (_, grads) = batch_gradients(&model, &refs, &corpus, &cfg).unwrap();
    let analytic: Vec<f64> = grads.iter().flatten().map(|&g| g as f64).collect();
    (rep64, compare_grads(&analytic, &numeric))
}
