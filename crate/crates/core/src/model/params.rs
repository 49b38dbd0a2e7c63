use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitMeta {
    pub seed: u64,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub tensor: Tensor<f32>,
}

/// All learnable weights, in a fixed creation order.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    blocks: Vec<ParamBlock>,
    index: HashMap<String, usize>,
    pub init: InitMeta,
}

enum Init {
    /// Uniform in ±scale·sqrt(3 / fan_in).
    Fan(usize),
    /// Uniform with standard deviation `std`.
    Std(f64),
    Const(f32),
}

impl Parameters {
    pub fn from_blocks(blocks: Vec<ParamBlock>, init: InitMeta) -> Self {
        let index = blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (b.name.clone(), i))
            .collect();
        Self {
            blocks,
            index,
            init,
        }
    }

    /// Scaled-uniform initialization driven by `config.init_seed`.
    pub fn init(config: &ModelConfig) -> Self {
        let mut rng = SplitMix64::new(config.init_seed);
        let scale = config.init_scale;
        let d = config.d;
        let hidden = d * config.ffn_mult;
        let patch_dim = config.patch_dim();
        let mut blocks = Vec::new();
        let mut add = |name: String, shape: &[usize], init: Init| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Fan(fan_in) => {
                    let a = scale * (3.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.uniform(-a, a) as f32).collect()
                }
                Init::Std(std) => {
                    let a = std * 3f64.sqrt();
                    (0..n).map(|_| rng.uniform(-a, a) as f32).collect()
                }
                Init::Const(c) => vec![c; n],
            };
            blocks.push(ParamBlock {
                name,
                tensor: Tensor::new(shape.to_vec(), data).expect("shape/product agree"),
            });
        };

        let emb_std = 0.5;
        add("text.tok_emb".into(), &[config.vocab_size, d], Init::Std(emb_std));
        add("text.pos_emb".into(), &[config.max_text_len, d], Init::Std(emb_std));
        add("vit.patch.w".into(), &[patch_dim, d], Init::Fan(patch_dim));
        add("vit.patch.b".into(), &[d], Init::Const(0.0));
        add("vit.pos_emb".into(), &[config.n_patches(), d], Init::Std(emb_std));
        add("vit.cls".into(), &[1, d], Init::Std(emb_std));

        let attention = |add: &mut dyn FnMut(String, &[usize], Init), prefix: &str| {
            for proj in ["q", "k", "v", "o"] {
                add(format!("{prefix}.{proj}.w"), &[d, d], Init::Fan(d));
                add(format!("{prefix}.{proj}.b"), &[d], Init::Const(0.0));
            }
        };
        let norm = |add: &mut dyn FnMut(String, &[usize], Init), prefix: &str| {
            add(format!("{prefix}.g"), &[d], Init::Const(1.0));
            add(format!("{prefix}.b"), &[d], Init::Const(0.0));
        };
        let ffn = |add: &mut dyn FnMut(String, &[usize], Init), prefix: &str| {
            add(format!("{prefix}.w1"), &[d, hidden], Init::Fan(d));
            add(format!("{prefix}.b1"), &[hidden], Init::Const(0.0));
            add(format!("{prefix}.w2"), &[hidden, d], Init::Fan(hidden));
            add(format!("{prefix}.b2"), &[d], Init::Const(0.0));
        };

        for l in 0..config.vit_layers {
            norm(&mut add, &format!("vit.{l}.ln1"));
            attention(&mut add, &format!("vit.{l}.attn"));
            norm(&mut add, &format!("vit.{l}.ln2"));
            ffn(&mut add, &format!("vit.{l}.ffn"));
        }
        norm(&mut add, "vit.ln_f");
        for l in 0..config.shift_layers {
            norm(&mut add, &format!("shift.{l}.ln1"));
            attention(&mut add, &format!("shift.{l}.self"));
            norm(&mut add, &format!("shift.{l}.ln_x"));
            attention(&mut add, &format!("shift.{l}.cross"));
            norm(&mut add, &format!("shift.{l}.ln2"));
            ffn(&mut add, &format!("shift.{l}.ffn"));
        }
        norm(&mut add, "shift.ln_f");
        add("proj.image".into(), &[d, config.d_e], Init::Fan(d));
        add("proj.text".into(), &[d, config.d_e], Init::Fan(d));

        Self::from_blocks(
            blocks,
            InitMeta {
                seed: config.init_seed,
                scale,
            },
        )
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.blocks.iter().map(|b| b.tensor.numel()).sum()
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.position(name).map(|i| &self.blocks[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.position(name).map(move |i| &mut self.blocks[i].tensor)
    }

    /// Concatenation of every block, in order.
    pub fn flatten(&self) -> Vec<f32> {
        self.blocks
            .iter()
            .flat_map(|b| b.tensor.data.iter().copied())
            .collect()
    }

    /// Start offset of each block inside [`Parameters::flatten`].
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.blocks
            .iter()
            .map(|b| {
                let o = acc;
                acc += b.tensor.numel();
                o
            })
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.tensor.is_finite())
    }
}
