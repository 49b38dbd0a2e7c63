use coir_core::image::Image;
use coir_core::model::{CaseModel, Graph, ModelConfig, Tokenizer};
use coir_core::rng::SplitMix64;
use coir_core::tensor::{finite_diff_check, Scalar, Tape, Tensor, TensorError, Var};

fn model(seed: u64) -> CaseModel {
    let tok = Tokenizer::from_corpus(["make the sky cloudy", "add a red disc"]);
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

fn image(r: &mut SplitMix64) -> Image {
    let mut img = Image::zeros(16, 16, 3);
    for v in &mut img.data {
        *v = r.next_f64() as f32;
    }
    img
}

/// cosine(query embedding, fixed unit vector) as a function of the flat
/// parameter vector.
fn query_cosine<'a, T: Scalar>(
    m: &'a CaseModel,
    img: &'a Image,
    ids: &[usize],
    fixed: &[f64],
) -> impl Fn(&mut Tape<T>, Var) -> Result<Var, TensorError> + 'a {
    let ids = ids.to_vec();
    let fixed: Vec<T> = fixed.iter().map(|&v| T::of(v)).collect();
    move |tape, flat| {
        let wrap = |e: coir_core::model::ModelError| TensorError::Contract(e.to_string());
        let mut g = Graph::over_flat(m, std::mem::take(tape), flat).map_err(wrap)?;
        let visual = g.encode_image(img).map_err(wrap)?;
        let q = g.query_embedding(&ids, visual).map_err(wrap)?;
        let f = g.tape.constant(vec![1, fixed.len()], fixed.clone())?;
        let p = g.tape.mul(q, f)?;
        let out = g.tape.sum(p)?;
        *tape = g.into_tape();
        Ok(out)
    }
}

fn unit(r: &mut SplitMix64, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| r.normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / norm).collect()
}

#[test]
fn query_branch_gradients_f64() {
    for seed in 0..3 {
        let m = model(seed);
        let mut r = SplitMix64::new(100 + seed);
        let img = image(&mut r);
        let fixed = unit(&mut r, 8);
        let ids = m.query_tokens("make the sky cloudy", Default::default(), seed % 2 == 1);
        let flat: Tensor<f64> = Tensor::vector(m.params.flatten().iter().map(|&v| v as f64).collect());
        let rep = finite_diff_check(query_cosine::<f64>(&m, &img, &ids, &fixed), &flat, 1e-5).unwrap();
        assert!(rep.max_rel_err < 1e-4, "seed {seed}: {rep:?}");
    }
}

#[test]
fn query_branch_gradients_f32() {
    let m = model(5);
    let mut r = SplitMix64::new(55);
    let img = image(&mut r);
    let fixed = unit(&mut r, 8);
    let ids = m.query_tokens("add a red disc", Default::default(), false);
    let flat: Tensor<f32> = Tensor::vector(m.params.flatten());
    let rep = finite_diff_check(query_cosine::<f32>(&m, &img, &ids, &fixed), &flat, 1e-2).unwrap();
    assert!(rep.max_rel_err < 1e-2, "{rep:?}");
}
