use coir_core::datasets::{gen_toy, load_corpus, load_triplets, write_toy, Manifest, Split, ToyConfig, ToyMode};
use coir_core::metrics::evaluate;
use coir_core::redundancy::bow_retriever;

fn small(mode: ToyMode, seed: u64) -> ToyConfig {
    ToyConfig {
        mode,
        train_triplets: 80,
        seed,
        ..ToyConfig::default()
    }
}

fn bow_r1(cfg: &ToyConfig) -> f64 {
    let data = gen_toy(cfg).unwrap();
    let captions: Vec<(String, String)> = data
        .captions()
        .into_iter()
        .zip(&data.images)
        .filter(|(_, im)| im.split == Split::Val)
        .map(|(c, _)| (c.id, c.caption))
        .collect();
    let (q, index) = bow_retriever(&data.val, captions.iter().map(|(i, c)| (i.as_str(), c.as_str()))).unwrap();
    evaluate(&q, &index, &[1]).unwrap().recall(1).unwrap()
}

#[test]
fn text_alone_stays_near_one_in_group_size_when_compositional() {
    for seed in 0..3 {
        let cfg = small(ToyMode::Compositional, seed);
        let r1 = bow_r1(&cfg);
        assert!(r1 <= 100.0 / cfg.group_size as f64 + 5.0, "seed {seed}: {r1}");
    }
}

#[test]
fn text_alone_does_better_when_redundant() {
    let comp = bow_r1(&small(ToyMode::Compositional, 1));
    let red = bow_r1(&small(ToyMode::Redundant, 1));
    assert!(red > comp + 20.0, "redundant {red} vs compositional {comp}");
}

#[test]
fn written_toy_set_loads_back() {
    let cfg = ToyConfig {
        train_triplets: 40,
        val_triplets: 20,
        val_corpus: 100,
        ..small(ToyMode::Compositional, 3)
    };
    let data = gen_toy(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_toy(dir.path(), &data).unwrap();
    assert_eq!(load_triplets(&dir.path().join("train.jsonl")).unwrap(), data.train);
    assert_eq!(load_triplets(&dir.path().join("val.jsonl")).unwrap(), data.val);
    let manifest = Manifest::load(&dir.path().join("manifest.json")).unwrap();
    let val = load_corpus(&manifest, dir.path(), Some(Split::Val)).unwrap();
    assert_eq!(val.len(), 100);
    let expected = data.corpus(Some(Split::Val));
    for id in val.ids() {
        assert_eq!(val.get(id), expected.get(id), "{id}");
    }
}
