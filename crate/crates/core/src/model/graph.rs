use super::{CaseModel, ModelError, Result};
use crate::image::Image;
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

enum Source {
    /// One leaf per parameter block, created on first use.
    Leaves { track: bool },
    /// Every block is a slice of a single flat leaf (gradient checks).
    Flat { flat: Var, offsets: Vec<usize> },
}

/// A tape bound to a model's parameters.
pub struct Graph<'m, T: Scalar = f32> {
    pub tape: Tape<T>,
    model: &'m CaseModel,
    bound: Vec<Option<Var>>,
    source: Source,
}

/// `softmax(q kᵀ / sqrt(d_h)) v`, computed independently per head on
/// column groups of width `d_h = d / n_heads`. With one head this is exactly
/// `softmax(q kᵀ / sqrt(d)) v`.
pub fn cross_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
) -> std::result::Result<Var, TensorError> {
    let d = tape.shape(q)[1];
    if tape.shape(k)[1] != d || tape.shape(v)[1] != d || tape.shape(k)[0] != tape.shape(v)[0] {
        return Err(TensorError::Shape {
            op: "cross_attention",
            lhs: tape.shape(q).to_vec(),
            rhs: tape.shape(k).to_vec(),
        });
    }
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(TensorError::Contract(format!(
            "cross_attention: width {d} not divisible into {n_heads} heads"
        )));
    }
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let probs = tape.softmax_rows(scores)?;
        heads.push(tape.matmul(probs, vh)?);
    }
    if n_heads == 1 {
        Ok(heads[0])
    } else {
        tape.concat_cols(&heads)
    }
}

impl<'m, T: Scalar> Graph<'m, T> {
    /// Parameters become leaves with `requires_grad = track`.
    pub fn new(model: &'m CaseModel, track: bool) -> Self {
        Self {
            tape: Tape::new(),
            model,
            bound: vec![None; model.params.len()],
            source: Source::Leaves { track },
        }
    }

    /// Binds every parameter block to a slice of `flat`, a tape node laid
    /// out like [`super::Parameters::flatten`].
    pub fn over_flat(model: &'m CaseModel, tape: Tape<T>, flat: Var) -> Result<Self> {
        let n = tape.value(flat).numel();
        if n != model.params.numel() {
            return Err(ModelError::Tensor(TensorError::Shape {
                op: "over_flat",
                lhs: vec![n],
                rhs: vec![model.params.numel()],
            }));
        }
        Ok(Self {
            tape,
            model,
            bound: vec![None; model.params.len()],
            source: Source::Flat {
                flat,
                offsets: model.params.offsets(),
            },
        })
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }

    pub fn model(&self) -> &'m CaseModel {
        self.model
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let idx = self
            .model
            .params
            .position(name)
            .ok_or_else(|| ModelError::Config(format!("missing parameter {name}")))?;
        if let Some(v) = self.bound[idx] {
            return Ok(v);
        }
        let block = &self.model.params.blocks()[idx].tensor;
        let var = match &self.source {
            Source::Leaves { track } => {
                let mut t: Tensor<T> = block.cast();
                t.requires_grad = *track;
                self.tape.leaf(t)
            }
            Source::Flat { flat, offsets } => {
                let (flat, offset) = (*flat, offsets[idx]);
                self.tape.extract(flat, offset, &block.shape)?
            }
        };
        self.bound[idx] = Some(var);
        Ok(var)
    }

    /// Gradients of every parameter block touched by this graph, keyed by
    /// block position. Call after a backward pass.
    pub fn take_param_grads(&mut self) -> Vec<(usize, Vec<T>)> {
        let mut out = Vec::new();
        for (idx, var) in self.bound.iter().enumerate() {
            if let Some(v) = var {
                if let Some(g) = self.tape.take_grad(*v) {
                    out.push((idx, g));
                }
            }
        }
        out
    }

    fn linear(&mut self, x: Var, prefix: &str, bias: bool) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let y = self.tape.matmul(x, w)?;
        if bias {
            let b = self.param(&format!("{prefix}.b"))?;
            Ok(self.tape.add_row(y, b)?)
        } else {
            Ok(y)
        }
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.g"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let eps = self.model.config.ln_eps;
        Ok(self.tape.layer_norm(x, g, b, eps)?)
    }

    fn attention(&mut self, xq: Var, xkv: Var, prefix: &str) -> Result<Var> {
        let q = self.linear(xq, &format!("{prefix}.q"), true)?;
        let k = self.linear(xkv, &format!("{prefix}.k"), true)?;
        let v = self.linear(xkv, &format!("{prefix}.v"), true)?;
        let heads = cross_attention(&mut self.tape, q, k, v, self.model.config.n_heads)?;
        self.linear(heads, &format!("{prefix}.o"), true)
    }

    fn feed_forward(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w1 = self.param(&format!("{prefix}.w1"))?;
        let b1 = self.param(&format!("{prefix}.b1"))?;
        let w2 = self.param(&format!("{prefix}.w2"))?;
        let b2 = self.param(&format!("{prefix}.b2"))?;
        let h = self.tape.matmul(x, w1)?;
        let h = self.tape.add_row(h, b1)?;
        let h = self.tape.gelu(h)?;
        let y = self.tape.matmul(h, w2)?;
        Ok(self.tape.add_row(y, b2)?)
    }

    fn residual(&mut self, x: Var, delta: Var) -> Result<Var> {
        Ok(self.tape.add(x, delta)?)
    }

    /// Patch matrix `[n_patches × patch²·channels]`, patches in row-major
    /// order, each flattened as (y, x, channel).
    pub fn patchify(&self, image: &Image) -> Result<Tensor<T>> {
        self.model.check_image(image)?;
        let c = &self.model.config;
        let (p, side) = (c.patch_size, c.image_size / c.patch_size);
        let mut data = Vec::with_capacity(c.n_patches() * c.patch_dim());
        for py in 0..side {
            for px in 0..side {
                for y in 0..p {
                    for x in 0..p {
                        data.extend(image.pixel(py * p + y, px * p + x).iter().map(|&v| T::of(v as f64)));
                    }
                }
            }
        }
        Ok(Tensor::new(vec![c.n_patches(), c.patch_dim()], data)?)
    }

    /// Visual token sequence before the first transformer block:
    /// `[cls; patches·W + b + pos]`.
    pub fn embed_patches(&mut self, image: &Image) -> Result<Var> {
        let patches = self.patchify(image)?;
        let patches = self.tape.leaf(patches);
        let x = self.linear(patches, "vit.patch", true)?;
        let pos = self.param("vit.pos_emb")?;
        let x = self.tape.add(x, pos)?;
        let cls = self.param("vit.cls")?;
        Ok(self.tape.concat_rows(&[cls, x])?)
    }

    /// `[n_visual × d]`, visual CLS at row 0.
    pub fn encode_image(&mut self, image: &Image) -> Result<Var> {
        let mut x = self.embed_patches(image)?;
        for l in 0..self.model.config.vit_layers {
            let h = self.norm(x, &format!("vit.{l}.ln1"))?;
            let a = self.attention(h, h, &format!("vit.{l}.attn"))?;
            x = self.residual(x, a)?;
            let h = self.norm(x, &format!("vit.{l}.ln2"))?;
            let f = self.feed_forward(h, &format!("vit.{l}.ffn"))?;
            x = self.residual(x, f)?;
        }
        self.norm(x, "vit.ln_f")
    }

    /// Token embeddings plus positions; returns `(input states, token rows)`.
    fn embed_tokens(&mut self, ids: &[usize]) -> Result<(Var, Var)> {
        let c = &self.model.config;
        if ids.len() > c.max_text_len {
            return Err(ModelError::Tensor(TensorError::Index {
                op: "embed_tokens",
                index: ids.len(),
                len: c.max_text_len,
            }));
        }
        let table = self.param("text.tok_emb")?;
        let tok = self.tape.embedding(table, ids)?;
        let pos_table = self.param("text.pos_emb")?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = self.tape.embedding(pos_table, &positions)?;
        Ok((self.tape.add(tok, pos)?, tok))
    }

    /// Shift encoder over `ids` with cross-attention to `visual`; returns
    /// the final text CLS state `[1 × d]` and the token-embedding rows.
    pub fn shift_encode(&mut self, ids: &[usize], visual: Var) -> Result<(Var, Var)> {
        let (mut x, tok) = self.embed_tokens(ids)?;
        for l in 0..self.model.config.shift_layers {
            let h = self.norm(x, &format!("shift.{l}.ln1"))?;
            let a = self.attention(h, h, &format!("shift.{l}.self"))?;
            x = self.residual(x, a)?;
            let h = self.norm(x, &format!("shift.{l}.ln_x"))?;
            let a = self.attention(h, visual, &format!("shift.{l}.cross"))?;
            x = self.residual(x, a)?;
            let h = self.norm(x, &format!("shift.{l}.ln2"))?;
            let f = self.feed_forward(h, &format!("shift.{l}.ffn"))?;
            x = self.residual(x, f)?;
        }
        let x = self.norm(x, "shift.ln_f")?;
        Ok((self.tape.select_rows(x, &[0])?, tok))
    }

    /// Unit-norm `[1 × d_e]` query embedding.
    pub fn query_embedding(&mut self, ids: &[usize], visual: Var) -> Result<Var> {
        let (cls, _) = self.shift_encode(ids, visual)?;
        self.project(cls, "proj.text")
    }

    /// As [`Graph::query_embedding`], also returning the token-embedding rows.
    pub fn query_embedding_with_tokens(&mut self, ids: &[usize], visual: Var) -> Result<(Var, Var)> {
        let (cls, tok) = self.shift_encode(ids, visual)?;
        Ok((self.project(cls, "proj.text")?, tok))
    }

    /// Unit-norm `[1 × d_e]` target embedding from the visual CLS state.
    pub fn target_embedding(&mut self, visual: Var) -> Result<Var> {
        let cls = self.tape.select_rows(visual, &[0])?;
        self.project(cls, "proj.image")
    }

    fn project(&mut self, cls: Var, name: &str) -> Result<Var> {
        let w = self.param(name)?;
        let y = self.tape.matmul(cls, w)?;
        Ok(self.tape.l2_normalize(y)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_model;
    use crate::rng::SplitMix64;

    fn rand_tensor(r: &mut SplitMix64, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| r.normal()).collect()).unwrap()
    }

    /// Direct evaluation of softmax(Q Kᵀ / sqrt(d)) V with plain loops.
    fn formula(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Vec<f64> {
        let (nt, nv, d) = (q.shape[0], k.shape[0], q.shape[1]);
        let mut out = vec![0.0; nt * d];
        for i in 0..nt {
            let logits: Vec<f64> = (0..nv)
                .map(|j| (0..d).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for j in 0..nv {
                let w = (logits[j] - m).exp() / z;
                for c in 0..d {
                    out[i * d + c] += w * v.get(j, c);
                }
            }
        }
        out
    }

    #[test]
    fn single_head_matches_formula() {
        let mut r = SplitMix64::new(5);
        let (q, k, v) = (rand_tensor(&mut r, 3, 8), rand_tensor(&mut r, 5, 8), rand_tensor(&mut r, 5, 8));
        let mut tape = Tape::<f64>::new();
        let (qv, kv, vv) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()));
        let s = cross_attention(&mut tape, qv, kv, vv, 1).unwrap();
        for (a, b) in tape.data(s).iter().zip(formula(&q, &k, &v)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_key_and_identical_keys() {
        let mut r = SplitMix64::new(9);
        let q = rand_tensor(&mut r, 4, 6);
        let k = rand_tensor(&mut r, 1, 6);
        let v = rand_tensor(&mut r, 1, 6);
        let mut tape = Tape::<f64>::new();
        let (qv, kv, vv) = (tape.leaf(q), tape.leaf(k), tape.leaf(v.clone()));
        let s = cross_attention(&mut tape, qv, kv, vv, 2).unwrap();
        for row in tape.data(s).chunks(6) {
            assert_eq!(row, &v.data[..]);
        }

        let q = rand_tensor(&mut r, 2, 6);
        let krow = rand_tensor(&mut r, 1, 6);
        let k = Tensor::new(vec![3, 6], krow.data.repeat(3)).unwrap();
        let v = rand_tensor(&mut r, 3, 6);
        let mean: Vec<f64> = (0..6).map(|c| (0..3).map(|j| v.get(j, c)).sum::<f64>() / 3.0).collect();
        let (qv, kv, vv) = (tape.leaf(q), tape.leaf(k), tape.leaf(v));
        let s = cross_attention(&mut tape, qv, kv, vv, 3).unwrap();
        for row in tape.data(s).chunks(6) {
            for (a, b) in row.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let mut tape = Tape::<f32>::new();
        let q = tape.leaf(Tensor::zeros(&[2, 8]));
        let k = tape.leaf(Tensor::zeros(&[3, 4]));
        let v = tape.leaf(Tensor::zeros(&[3, 4]));
        assert!(matches!(
            cross_attention(&mut tape, q, k, v, 1),
            Err(TensorError::Shape { .. })
        ));
    }

    #[test]
    fn zero_image_is_independent_of_patch_weights() {
        let mut m = tiny_model();
        let zero = m.zero_image();
        let run = |m: &CaseModel| {
            let mut g = Graph::<f32>::new(m, false);
            let v = g.encode_image(&zero).unwrap();
            g.tape.data(v).to_vec()
        };
        let before = run(&m);
        for w in &mut m.params.get_mut("vit.patch.w").unwrap().data {
            *w += 0.37;
        }
        assert_eq!(before, run(&m));
    }

    #[test]
    fn swapping_patches_only_moves_their_embeddings() {
        let m = tiny_model();
        let mut r = SplitMix64::new(2);
        let mut img = m.zero_image();
        for v in &mut img.data {
            *v = r.next_f64() as f32;
        }
        // 16×16 with 8px patches: swap patch 0 (top-left) and patch 3 (bottom-right)
        let mut swapped = img.clone();
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    let a = (y * 16 + x) * 3 + c;
                    let b = ((y + 8) * 16 + x + 8) * 3 + c;
                    swapped.data.swap(a, b);
                }
            }
        }
        let states = |im: &Image| {
            let mut g = Graph::<f32>::new(&m, false);
            let v = g.embed_patches(im).unwrap();
            g.tape.value(v).clone()
        };
        let (a, b) = (states(&img), states(&swapped));
        for row in 0..a.rows() {
            let changed = a.row(row) != b.row(row);
            // row 0 is the visual CLS, patch i sits at row i + 1
            assert_eq!(changed, row == 1 || row == 4, "row {row}");
        }
    }
}
