//! Synthetic scenes: a grid of cells, each empty or holding one colored
//! shape. A transition text edits one cell.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{encode_jsonl, io_err, DatasetError, ImageEntry, ImageFormat, Manifest, Result, Split, Triplet};
use crate::image::{encode_ppm, Image};
use crate::rng::SplitMix64;

pub const SHAPES: [&str; 4] = ["square", "disc", "cross", "frame"];
pub const COLORS: [(&str, [u8; 3]); 6] = [
    ("red", [255, 0, 0]),
    ("green", [0, 255, 0]),
    ("blue", [0, 0, 255]),
    ("yellow", [255, 255, 0]),
    ("magenta", [255, 0, 255]),
    ("cyan", [0, 255, 255]),
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyMode {
    /// Each text is shared by `group_size` queries with different targets.
    #[default]
    Compositional,
    /// Texts also spell out the whole target scene.
    Redundant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub image_size: usize,
    /// Cells per side.
    pub grid: usize,
    pub group_size: usize,
    pub mode: ToyMode,
    pub train_triplets: usize,
    pub val_triplets: usize,
    /// Val corpus size (queries, targets, hard negatives, distractors).
    pub val_corpus: usize,
    /// Alternative edits of each val query added to the val corpus.
    pub hard_negatives: usize,
    pub subsets: bool,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            grid: 2,
            group_size: 4,
            mode: ToyMode::Compositional,
            train_triplets: 2000,
            val_triplets: 124,
            val_corpus: 500,
            hard_negatives: 2,
            subsets: false,
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Object {
    pub shape: u8,
    pub color: u8,
}

impl Object {
    fn phrase(self) -> String {
        format!("{} {}", COLORS[self.color as usize].0, SHAPES[self.shape as usize])
    }

    fn random(rng: &mut SplitMix64) -> Self {
        Object {
            shape: rng.index(SHAPES.len()) as u8,
            color: rng.index(COLORS.len()) as u8,
        }
    }
}

/// Cells in row-major order.
pub type Scene = Vec<Option<Object>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Edit {
    Recolor { obj: Object, color: u8 },
    Replace { obj: Object, with: Object },
    Remove { obj: Object },
    Add { obj: Object },
}

impl Edit {
    /// Every edit, in a fixed order.
    pub fn all() -> Vec<Edit> {
        let objects: Vec<Object> = (0..SHAPES.len() as u8)
            .flat_map(|shape| (0..COLORS.len() as u8).map(move |color| Object { shape, color }))
            .collect();
        let mut out = Vec::new();
        for &obj in &objects {
            for color in (0..COLORS.len() as u8).filter(|&c| c != obj.color) {
                out.push(Edit::Recolor { obj, color });
            }
            for &with in objects.iter().filter(|w| w.shape != obj.shape) {
                out.push(Edit::Replace { obj, with });
            }
            out.push(Edit::Remove { obj });
            out.push(Edit::Add { obj });
        }
        out
    }

    pub fn family(self) -> &'static str {
        match self {
            Edit::Recolor { .. } => "change",
            Edit::Replace { .. } => "replace",
            Edit::Remove { .. } => "remove",
            Edit::Add { .. } => "add",
        }
    }

    pub fn text(self) -> String {
        match self {
            Edit::Recolor { obj, color } => {
                format!("change the color of the {} to {}", obj.phrase(), COLORS[color as usize].0)
            }
            Edit::Replace { obj, with } => format!("replace the {} with a {}", obj.phrase(), with.phrase()),
            Edit::Remove { obj } => format!("remove the {}", obj.phrase()),
            Edit::Add { obj } => format!("add a {} in the empty cell", obj.phrase()),
        }
    }

    /// The edited scene, or `None` if the edit does not apply: the
    /// referenced object must occur exactly once, and `Add` needs exactly
    /// one empty cell.
    pub fn apply(self, scene: &[Option<Object>]) -> Option<Scene> {
        let mut out = scene.to_vec();
        match self {
            Edit::Add { obj } => {
                let empty: Vec<usize> = (0..scene.len()).filter(|&i| scene[i].is_none()).collect();
                if empty.len() != 1 {
                    return None;
                }
                out[empty[0]] = Some(obj);
            }
            Edit::Recolor { obj, .. } | Edit::Replace { obj, .. } | Edit::Remove { obj } => {
                let hits: Vec<usize> = (0..scene.len()).filter(|&i| scene[i] == Some(obj)).collect();
                if hits.len() != 1 {
                    return None;
                }
                out[hits[0]] = match self {
                    Edit::Recolor { color, .. } => Some(Object { color, ..obj }),
                    Edit::Replace { with, .. } => Some(with),
                    _ => None,
                };
            }
        }
        Some(out)
    }

    /// A random scene of `cells` cells to which this edit applies.
    fn sample_query(self, cells: usize, rng: &mut SplitMix64) -> Scene {
        let mut scene: Scene = vec![None; cells];
        match self {
            Edit::Add { .. } => {
                let empty = rng.index(cells);
                for (i, c) in scene.iter_mut().enumerate() {
                    if i != empty {
                        *c = Some(Object::random(rng));
                    }
                }
            }
            Edit::Recolor { obj, .. } | Edit::Replace { obj, .. } | Edit::Remove { obj } => {
                let n_obj = 2 + rng.index(cells - 1);
                let mut order: Vec<usize> = (0..cells).collect();
                rng.shuffle(&mut order);
                scene[order[0]] = Some(obj);
                for &cell in &order[1..n_obj] {
                    let other = loop {
                        let o = Object::random(rng);
                        if o != obj {
                            break o;
                        }
                    };
                    scene[cell] = Some(other);
                }
            }
        }
        scene
    }
}

pub fn cell_name(cell: usize, grid: usize) -> String {
    if grid == 2 {
        ["top left", "top right", "bottom left", "bottom right"][cell].to_string()
    } else {
        format!("row {} column {}", cell / grid + 1, cell % grid + 1)
    }
}

/// Lists the objects with their cells, e.g. "a red square at top left".
pub fn caption(scene: &[Option<Object>], grid: usize) -> String {
    let parts: Vec<String> = scene
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.map(|o| format!("a {} at {}", o.phrase(), cell_name(i, grid))))
        .collect();
    if parts.is_empty() {
        "an empty picture".into()
    } else {
        parts.join(", ")
    }
}

/// Whether local pixel `(y, x)` of a `size`-pixel cell is covered by `shape`.
fn covers(shape: u8, y: usize, x: usize, size: usize) -> bool {
    let (y, x, s) = (y as i64, x as i64, size as i64);
    // doubled coordinates centered on the cell
    let (dy, dx) = (2 * y + 1 - s, 2 * x + 1 - s);
    let inner = |half: i64| dy.abs() < half && dx.abs() < half;
    match SHAPES[shape as usize] {
        "square" => inner(s * 5 / 8),
        "disc" => dy * dy + dx * dx <= (s * 5 / 8) * (s * 5 / 8),
        "cross" => (dy.abs() <= s / 4 && dx.abs() < s * 6 / 8) || (dx.abs() <= s / 4 && dy.abs() < s * 6 / 8),
        _ => inner(s * 6 / 8) && !inner(s * 3 / 8),
    }
}

pub fn render(scene: &[Option<Object>], image_size: usize, grid: usize) -> Image {
    let cell = image_size / grid;
    let mut bytes = vec![0u8; image_size * image_size * 3];
    for (i, obj) in scene.iter().enumerate() {
        let Some(obj) = obj else { continue };
        let (cy, cx) = (i / grid * cell, i % grid * cell);
        let rgb = COLORS[obj.color as usize].1;
        for y in 0..cell {
            for x in 0..cell {
                if covers(obj.shape, y, x, cell) {
                    let p = ((cy + y) * image_size + cx + x) * 3;
                    bytes[p..p + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
    Image::from_rgb8(image_size, image_size, &bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRow {
    pub id: String,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyImage {
    pub id: String,
    pub split: Split,
    pub scene: Scene,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub config: ToyConfig,
    pub train: Vec<Triplet>,
    pub val: Vec<Triplet>,
    pub images: Vec<ToyImage>,
}

impl ToyDataset {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            images: self
                .images
                .iter()
                .map(|im| ImageEntry {
                    id: im.id.clone(),
                    path: format!("images/{}.ppm", im.id),
                    format: ImageFormat::Ppm,
                    split: im.split,
                })
                .collect(),
        }
    }

    pub fn captions(&self) -> Vec<CaptionRow> {
        self.images
            .iter()
            .map(|im| CaptionRow {
                id: im.id.clone(),
                caption: caption(&im.scene, self.config.grid),
            })
            .collect()
    }

    pub fn corpus(&self, split: Option<Split>) -> super::Corpus {
        let mut c = super::Corpus::default();
        for im in self.images.iter().filter(|im| split.is_none_or(|s| im.split == s)) {
            c.insert(im.id.clone(), im.image.clone());
        }
        c
    }
}

/// Scenes of one split, deduplicated, in first-seen order.
#[derive(Default)]
struct Registry {
    scenes: Vec<Scene>,
    index: HashMap<Scene, usize>,
}

impl Registry {
    fn add(&mut self, scene: &Scene) -> usize {
        if let Some(&i) = self.index.get(scene) {
            return i;
        }
        self.scenes.push(scene.clone());
        self.index.insert(scene.clone(), self.scenes.len() - 1);
        self.scenes.len() - 1
    }
}

struct Draft {
    query: usize,
    target: usize,
    edit: Edit,
}

fn validate(cfg: &ToyConfig) -> Result<()> {
    let bad = |m: String| Err(DatasetError::Generation(m));
    if cfg.grid < 2 || !cfg.image_size.is_multiple_of(cfg.grid) || cfg.image_size / cfg.grid < 8 {
        return bad(format!(
            "image_size {} cannot hold a {}x{} grid of cells at least 8 px wide",
            cfg.image_size, cfg.grid, cfg.grid
        ));
    }
    if cfg.group_size < 2 {
        return bad("group_size must be at least 2".into());
    }
    if cfg.train_triplets == 0 || cfg.val_triplets == 0 {
        return bad("triplet counts must be positive".into());
    }
    if !cfg.train_triplets.is_multiple_of(cfg.group_size) || !cfg.val_triplets.is_multiple_of(cfg.group_size) {
        return bad(format!("triplet counts must be multiples of group_size {}", cfg.group_size));
    }
    let texts = (cfg.train_triplets + cfg.val_triplets) / cfg.group_size;
    let available = Edit::all().len();
    if texts > available {
        return bad(format!("{texts} distinct texts needed but only {available} exist"));
    }
    Ok(())
}

/// Draws `group_size` triplets for each edit: distinct query scenes with
/// distinct targets.
fn draft_groups(edits: &[Edit], cfg: &ToyConfig, rng: &mut SplitMix64, reg: &mut Registry) -> Result<Vec<Draft>> {
    let cells = cfg.grid * cfg.grid;
    let mut out = Vec::new();
    for &edit in edits {
        let mut queries = HashSet::new();
        let mut targets = HashSet::new();
        let mut attempts = 0;
        while queries.len() < cfg.group_size {
            attempts += 1;
            if attempts > 10_000 {
                return Err(DatasetError::Generation(format!("cannot find {} scenes for {:?}", cfg.group_size, edit.text())));
            }
            let q = edit.sample_query(cells, rng);
            let t = edit.apply(&q).expect("sampled scenes admit their edit");
            if queries.contains(&q) || targets.contains(&t) {
                continue;
            }
            queries.insert(q.clone());
            targets.insert(t.clone());
            out.push(Draft {
                query: reg.add(&q),
                target: reg.add(&t),
                edit,
            });
        }
    }
    Ok(out)
}

fn random_scene(cells: usize, rng: &mut SplitMix64) -> Scene {
    (0..cells)
        .map(|_| if rng.index(3) == 0 { None } else { Some(Object::random(rng)) })
        .collect()
}

pub fn gen_toy(cfg: &ToyConfig) -> Result<ToyDataset> {
    validate(cfg)?;
    let mut rng = SplitMix64::new(cfg.seed);
    let cells = cfg.grid * cfg.grid;
    let mut pool = Edit::all();
    rng.shuffle(&mut pool);
    let n_train = cfg.train_triplets / cfg.group_size;
    let n_val = cfg.val_triplets / cfg.group_size;
    let (train_edits, rest) = pool.split_at(n_train);
    let val_edits = &rest[..n_val];

    let mut train_reg = Registry::default();
    let train = draft_groups(train_edits, cfg, &mut rng, &mut train_reg)?;
    let mut val_reg = Registry::default();
    let val = draft_groups(val_edits, cfg, &mut rng, &mut val_reg)?;

    let all = Edit::all();
    let mut negatives: Vec<Vec<usize>> = Vec::with_capacity(val.len());
    for d in &val {
        let q = val_reg.scenes[d.query].clone();
        let t = val_reg.scenes[d.target].clone();
        let mut options: Vec<Scene> = all
            .iter()
            .filter(|&&e| e != d.edit)
            .filter_map(|e| e.apply(&q))
            .filter(|s| *s != t && *s != q)
            .collect();
        options.sort();
        options.dedup();
        rng.shuffle(&mut options);
        negatives.push(options.iter().take(cfg.hard_negatives).map(|s| val_reg.add(s)).collect());
    }
    if val_reg.scenes.len() > cfg.val_corpus {
        return Err(DatasetError::Generation(format!(
            "val_corpus {} is smaller than the {} images the val triplets need",
            cfg.val_corpus,
            val_reg.scenes.len()
        )));
    }
    let mut attempts = 0;
    while val_reg.scenes.len() < cfg.val_corpus {
        attempts += 1;
        if attempts > 100 * cfg.val_corpus {
            return Err(DatasetError::Generation("cannot draw enough distinct distractors".into()));
        }
        let s = random_scene(cells, &mut rng);
        val_reg.add(&s);
    }

    let mut images = Vec::new();
    let mut assign = |reg: &Registry, split: Split, prefix: &str, rng: &mut SplitMix64| {
        let mut order: Vec<usize> = (0..reg.scenes.len()).collect();
        rng.shuffle(&mut order);
        let mut ids = vec![String::new(); order.len()];
        for (pos, &scene_idx) in order.iter().enumerate() {
            ids[scene_idx] = format!("{prefix}{pos:05}");
        }
        for (pos, &scene_idx) in order.iter().enumerate() {
            let scene = &reg.scenes[scene_idx];
            images.push(ToyImage {
                id: format!("{prefix}{pos:05}"),
                split,
                scene: scene.clone(),
                image: render(scene, cfg.image_size, cfg.grid),
            });
        }
        ids
    };
    let train_ids = assign(&train_reg, Split::Train, "t", &mut rng);
    let val_ids = assign(&val_reg, Split::Val, "v", &mut rng);

    let make = |drafts: &[Draft], reg: &Registry, ids: &[String], prefix: &str| -> Vec<Triplet> {
        drafts
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let target_caption = caption(&reg.scenes[d.target], cfg.grid);
                let text = match cfg.mode {
                    ToyMode::Compositional => d.edit.text(),
                    ToyMode::Redundant => format!("{} so the picture shows {}", d.edit.text(), target_caption),
                };
                Triplet {
                    qid: format!("{prefix}-{i:05}"),
                    query_image: ids[d.query].clone(),
                    query_text: text,
                    target_image: ids[d.target].clone(),
                    subset: None,
                    category: Some(d.edit.family().to_string()),
                    caption: Some(target_caption),
                }
            })
            .collect()
    };
    let train = make(&train, &train_reg, &train_ids, "train");
    let mut val_triplets = make(&val, &val_reg, &val_ids, "val");

    if cfg.subsets {
        for (t, (d, negs)) in val_triplets.iter_mut().zip(val.iter().zip(&negatives)) {
            let mut members = vec![d.target, d.query];
            members.extend(negs);
            while members.len() < 6 {
                let pick = rng.index(val_reg.scenes.len());
                if !members.contains(&pick) {
                    members.push(pick);
                }
            }
            members.truncate(6);
            rng.shuffle(&mut members);
            t.subset = Some(members.iter().map(|&m| val_ids[m].clone()).collect());
        }
    }

    Ok(ToyDataset {
        config: cfg.clone(),
        train,
        val: val_triplets,
        images,
    })
}

/// Writes `images/*.ppm`, `manifest.json`, `train.jsonl`, `val.jsonl`,
/// `captions.jsonl` and `toy_config.json` under `dir`.
pub fn write_toy(dir: &Path, data: &ToyDataset) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(io_err(&images))?;
    for im in &data.images {
        let p = images.join(format!("{}.ppm", im.id));
        std::fs::write(&p, encode_ppm(&im.image)).map_err(io_err(&p))?;
    }
    let write = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(io_err(&p))
    };
    let mut manifest = serde_json::to_vec_pretty(&data.manifest()).expect("manifest serializes");
    manifest.push(b'\n');
    write("manifest.json", manifest)?;
    write("train.jsonl", encode_jsonl(&data.train))?;
    write("val.jsonl", encode_jsonl(&data.val))?;
    write("captions.jsonl", encode_jsonl(&data.captions()))?;
    let mut cfg = serde_json::to_vec_pretty(&data.config).expect("config serializes");
    cfg.push(b'\n');
    write("toy_config.json", cfg)
}
