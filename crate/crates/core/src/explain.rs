//! Occlusion heatmaps and token saliency for the query branch.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::model::{CaseModel, Graph, ModelError, QueryMode, Result, Tokenizer};
use crate::tensor::{dot_f64, Tensor};

pub const DEFAULT_WINDOW: usize = 8;
pub const DEFAULT_STRIDE: usize = 4;

/// Similarity drop per window position; positive means the region matters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub window: usize,
    pub stride: usize,
    pub base_similarity: f64,
    /// Row-major `rows × cols`.
    pub grid: Vec<Vec<f64>>,
}

impl Heatmap {
    pub fn rows(&self) -> usize {
        self.grid.len()
    }

    pub fn cols(&self) -> usize {
        self.grid.first().map_or(0, Vec::len)
    }

    pub fn max_cell(&self) -> (usize, usize) {
        let mut best = (0, 0);
        for (r, row) in self.grid.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if v > self.grid[best.0][best.1] {
                    best = (r, c);
                }
            }
        }
        best
    }
}

/// Window positions along an axis of length `len`.
pub fn grid_len(len: usize, window: usize, stride: usize) -> usize {
    (len - window) / stride + 1
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let n = dot_f64(b, b).sqrt();
    if n == 0.0 {
        0.0
    } else {
        dot_f64(a, b) / (dot_f64(a, a).sqrt() * n)
    }
}

/// Blacks out each `window`×`window` square (step `stride`) of the query
/// image and records cos(unmasked, target) − cos(masked, target).
pub fn mask_heatmap(
    model: &CaseModel,
    image: &Image,
    text: &str,
    mode: QueryMode,
    target: &[f32],
    window: usize,
    stride: usize,
) -> Result<Heatmap> {
    model.check_image(image)?;
    let (h, w, _) = image.shape();
    if window == 0 || window > h || window > w {
        return Err(ModelError::Config(format!("window {window} must be in 1..={}", h.min(w))));
    }
    if stride == 0 {
        return Err(ModelError::Config("stride must be at least 1".into()));
    }
    if target.len() != model.config.d_e {
        return Err(ModelError::Config(format!(
            "target has {} dims, model embeds into {}",
            target.len(),
            model.config.d_e
        )));
    }
    let base = cosine(&model.forward_query(image, text, mode)?, target);
    let (rows, cols) = (grid_len(h, window, stride), grid_len(w, window, stride));
    let cells = (0..rows * cols)
        .into_par_iter()
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            let mut masked = image.clone();
            masked.fill_rect(r * stride, c * stride, window, window, 0.0);
            Ok(base - cosine(&model.forward_query(&masked, text, mode)?, target))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Heatmap {
        window,
        stride,
        base_similarity: base,
        grid: cells.chunks(cols).map(<[f64]>::to_vec).collect(),
    })
}

/// Colormap stops `(position, rgb)`, interpolated linearly.
pub const COLORMAP: [(f32, [f32; 3]); 5] = [
    (0.00, [0.0, 0.0, 0.5]),
    (0.25, [0.0, 0.0, 1.0]),
    (0.50, [0.0, 1.0, 1.0]),
    (0.75, [1.0, 1.0, 0.0]),
    (1.00, [1.0, 0.0, 0.0]),
];

pub const OVERLAY_ALPHA: f32 = 0.5;

pub fn colormap(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    for w in COLORMAP.windows(2) {
        let ((a, ca), (b, cb)) = (w[0], w[1]);
        if t <= b {
            let u = (t - a) / (b - a);
            return [0, 1, 2].map(|i| ca[i] + u * (cb[i] - ca[i]));
        }
    }
    COLORMAP[COLORMAP.len() - 1].1
}

/// Per-pixel heat (mean over covering windows, negatives clipped, scaled
/// by the maximum) blended over the image with [`OVERLAY_ALPHA`].
pub fn overlay(image: &Image, heat: &Heatmap) -> Image {
    let (h, w, c) = image.shape();
    let mut sum = vec![0.0f64; h * w];
    let mut count = vec![0u32; h * w];
    for (r, row) in heat.grid.iter().enumerate() {
        for (col, &v) in row.iter().enumerate() {
            for y in r * heat.stride..(r * heat.stride + heat.window).min(h) {
                for x in col * heat.stride..(col * heat.stride + heat.window).min(w) {
                    sum[y * w + x] += v.max(0.0);
                    count[y * w + x] += 1;
                }
            }
        }
    }
    let per_pixel: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
        .collect();
    let max = per_pixel.iter().cloned().fold(0.0, f64::max);
    let mut out = Image::zeros(h, w, 3);
    for y in 0..h {
        for x in 0..w {
            let t = if max > 0.0 { (per_pixel[y * w + x] / max) as f32 } else { 0.0 };
            let rgb = colormap(t);
            let px = image.pixel(y, x);
            for ch in 0..3 {
                let base = px[ch.min(c - 1)];
                out.data[(y * w + x) * 3 + ch] = (1.0 - OVERLAY_ALPHA) * base + OVERLAY_ALPHA * rgb[ch];
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token: String,
    pub id: usize,
    pub score: f32,
    pub special: bool,
}

struct Saliency {
    scores: Vec<TokenScore>,
    #[cfg_attr(not(test), allow(dead_code))]
    /// d cos / d token-embedding rows, `[len × d]`.
    row_grads: Vec<f32>,
    /// Gradient of the whole token table, `[vocab × d]`.
    #[cfg_attr(not(test), allow(dead_code))]
    table_grad: Vec<f32>,
}

fn saliency(model: &CaseModel, image: &Image, text: &str, mode: QueryMode, target: &[f32]) -> Result<Saliency> {
    if text.trim().is_empty() {
        return Err(ModelError::Config("saliency needs a non-empty text".into()));
    }
    model.check_image(image)?;
    let d_e = model.config.d_e;
    if target.len() != d_e {
        return Err(ModelError::Config(format!("target has {} dims, model embeds into {d_e}", target.len())));
    }
    let tn = dot_f64(target, target).sqrt();
    let unit: Vec<f32> = target
        .iter()
        .map(|&v| if tn > 0.0 { (v as f64 / tn) as f32 } else { 0.0 })
        .collect();

    let mut g = Graph::<f32>::new(model, true);
    let zero;
    let img = if mode == QueryMode::TextOnly {
        zero = model.zero_image();
        &zero
    } else {
        image
    };
    let visual = g.encode_image(img)?;
    let ids = model.query_tokens(text, mode.variant(), mode.is_reverse());
    let (q, tok) = g.query_embedding_with_tokens(&ids, visual)?;
    g.tape.retain_grad(tok);
    let t = g.tape.leaf(Tensor::new(vec![1, d_e], unit)?);
    let prod = g.tape.mul(q, t)?;
    let cos = g.tape.sum(prod)?;
    g.tape.backward(cos)?;
    let d = model.config.d;
    let row_grads = g.tape.grad(tok).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; ids.len() * d]);
    let table_pos = model.params.position("text.tok_emb").expect("token table exists");
    let table_grad = g
        .take_param_grads()
        .into_iter()
        .find(|(i, _)| *i == table_pos)
        .map(|(_, g)| g)
        .unwrap_or_else(|| vec![0.0; model.tokenizer.len() * d]);
    let scores = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| TokenScore {
            token: model.tokenizer.token(id).to_string(),
            id,
            score: (dot_f64(&row_grads[i * d..(i + 1) * d], &row_grads[i * d..(i + 1) * d]).sqrt()) as f32,
            special: Tokenizer::is_special(id),
        })
        .collect();
    Ok(Saliency {
        scores,
        row_grads,
        table_grad,
    })
}

/// L2 norm of d cos(query, target) / d(token embedding row) for every
/// token the query branch consumes, specials included and flagged.
pub fn token_saliency(
    model: &CaseModel,
    image: &Image,
    text: &str,
    mode: QueryMode,
    target: &[f32],
) -> Result<Vec<TokenScore>> {
    Ok(saliency(model, image, text, mode, target)?.scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_model;
    use crate::rng::SplitMix64;

    fn image(seed: u64) -> Image {
        let mut r = SplitMix64::new(seed);
        let mut img = Image::zeros(16, 16, 3);
        for v in &mut img.data {
            *v = r.next_f64() as f32;
        }
        img
    }

    #[test]
    fn grid_dims() {
        assert_eq!(grid_len(32, 8, 8), 4);
        assert_eq!(grid_len(32, 8, 4), 7);
        assert_eq!(grid_len(16, 16, 3), 1);
        let m = tiny_model();
        let t = m.encode_target(&image(2)).unwrap();
        let h = mask_heatmap(&m, &image(1), "make the sky cloudy", QueryMode::Standard, &t, 8, 4).unwrap();
        assert_eq!((h.rows(), h.cols()), (3, 3));
        assert!(mask_heatmap(&m, &image(1), "x", QueryMode::Standard, &t, 17, 4).is_err());
        assert!(mask_heatmap(&m, &image(1), "x", QueryMode::Standard, &t, 8, 0).is_err());
    }

    #[test]
    fn black_regions_have_zero_heat_and_object_cell_is_max() {
        let m = tiny_model();
        let mut img = Image::zeros(16, 16, 3);
        img.fill_rect(9, 1, 4, 3, 0.9);
        let text = "remove the red disc";
        let target = m.forward_query(&img, text, QueryMode::Standard).unwrap();
        let h = mask_heatmap(&m, &img, text, QueryMode::Standard, &target, 4, 4).unwrap();
        for (r, row) in h.grid.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if (r, c) == (2, 0) || (r, c) == (3, 0) {
                    continue;
                }
                assert_eq!(v, 0.0, "cell {r},{c}");
            }
        }
        assert_eq!(h.max_cell().1, 0);
        assert!(h.grid[h.max_cell().0][0] > 0.0);
    }

    #[test]
    fn colormap_endpoints_and_overlay() {
        assert_eq!(colormap(0.0), [0.0, 0.0, 0.5]);
        assert_eq!(colormap(1.0), [1.0, 0.0, 0.0]);
        assert_eq!(colormap(0.625), [0.5, 1.0, 0.5]);
        let heat = Heatmap {
            window: 8,
            stride: 8,
            base_similarity: 1.0,
            grid: vec![vec![0.0, 1.0], vec![0.0, 0.0]],
        };
        let o = overlay(&Image::zeros(16, 16, 3), &heat);
        assert_eq!(o.pixel(0, 15), &[0.5, 0.0, 0.0]);
        assert_eq!(o.pixel(15, 0), &[0.0, 0.0, 0.25]);
    }

    #[test]
    fn zero_target_gives_zero_saliency() {
        let m = tiny_model();
        let s = token_saliency(&m, &image(1), "make the sky cloudy", QueryMode::Standard, &[0.0; 8]).unwrap();
        assert_eq!(s.len(), 6);
        assert!(s.iter().all(|t| t.score == 0.0));
        assert!(s[0].special && s[5].special && !s[1].special);
        assert!(token_saliency(&m, &image(1), "  ", QueryMode::Standard, &[0.0; 8]).is_err());
    }

    #[test]
    fn duplicate_words_accumulate_into_table_row() {
        let m = tiny_model();
        let t = m.encode_target(&image(4)).unwrap();
        let text = "remove the red the disc";
        let s = saliency(&m, &image(1), text, QueryMode::Standard, &t).unwrap();
        let ids = m.query_tokens(text, crate::model::Variant::Full, false);
        let the = m.tokenizer.id("the");
        let pos: Vec<usize> = ids.iter().enumerate().filter(|(_, &id)| id == the).map(|(i, _)| i).collect();
        assert_eq!(pos.len(), 2);
        let d = m.config.d;
        for j in 0..d {
            let sum = s.row_grads[pos[0] * d + j] + s.row_grads[pos[1] * d + j];
            let table = s.table_grad[the * d + j];
            assert!((sum - table).abs() <= 1e-6 * (1.0 + table.abs()), "{sum} vs {table}");
        }
        assert!(pos.iter().all(|&p| s.scores[p].score.is_finite() && s.scores[p].score > 0.0));
        let again = token_saliency(&m, &image(1), text, QueryMode::Standard, &t).unwrap();
        assert_eq!(again, s.scores);
    }

    #[test]
    fn saliency_matches_finite_differences() {
        let m = tiny_model();
        let img = image(1);
        let t = m.encode_target(&image(4)).unwrap();
        let text = "make the sky cloudy";
        let s = saliency(&m, &img, text, QueryMode::Standard, &t).unwrap();
        let ids = m.query_tokens(text, crate::model::Variant::Full, false);
        let d = m.config.d;
        let table = m.params.position("text.tok_emb").unwrap();
        let eps = 1e-2f32;
        // "sky" appears once, so its table row gradient is its token row gradient
        let word = m.tokenizer.id("sky");
        let row = ids.iter().position(|&i| i == word).unwrap();
        let mut num = vec![0.0f64; d];
        for j in 0..d {
            let eval = |delta: f32| {
                let mut p = m.clone();
                p.params.blocks_mut()[table].tensor.data[word * d + j] += delta;
                cosine(&p.forward_query(&img, text, QueryMode::Standard).unwrap(), &t)
            };
            num[j] = (eval(eps) - eval(-eps)) / (2.0 * eps as f64);
        }
        let ana: Vec<f64> = s.row_grads[row * d..(row + 1) * d].iter().map(|&v| v as f64).collect();
        let diff = ana.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = ana.iter().map(|a| a * a).sum::<f64>().sqrt().max(num.iter().map(|a| a * a).sum::<f64>().sqrt());
        assert!(diff / scale < 1e-2, "rel err {}", diff / scale);
    }
}
