mod common;

use coir_core::datasets::{Corpus, Triplet};
use coir_core::model::Variant;
use coir_core::rng::SplitMix64;
use coir_core::training::{build_batch, fit, plan_batch, train_epoch, LossVariant, TrainConfig, TrainError};
use common::{random_image, tiny_model};

const TEXTS: [&str; 3] = ["make the sky cloudy", "add a red disc", "remove the blue frame"];

/// `n` triplets over a ring of `n` images: triplet `i` maps image `i` to `i + 1`.
fn ring(n: usize, seed: u64) -> (Vec<Triplet>, Corpus) {
    let mut r = SplitMix64::new(seed);
    let mut corpus = Corpus::default();
    for i in 0..n {
        corpus.insert(format!("i{i}"), random_image(&mut r, 16));
    }
    let triplets = (0..n)
        .map(|i| Triplet {
            qid: format!("q{i}"),
            query_image: format!("i{i}"),
            query_text: TEXTS[i % 3].into(),
            target_image: format!("i{}", (i + 1) % n),
            subset: None,
            category: None,
            caption: None,
        })
        .collect();
    (triplets, corpus)
}

fn cfg(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::toy();
    cfg.epochs = epochs;
    cfg.batch_size = 4;
    cfg.schedule.lr0 = 1e-2;
    cfg
}

#[test]
fn reverse_queries_double_the_rows() {
    let model = tiny_model(1);
    let (triplets, corpus) = ring(8, 3);
    let refs: Vec<&Triplet> = triplets.iter().collect();
    let on = build_batch(&model, &refs, &corpus, true, Variant::Full).unwrap();
    let off = build_batch(&model, &refs, &corpus, false, Variant::Full).unwrap();
    assert_eq!(on.queries.len(), 16);
    assert_eq!(off.queries.len(), 8);
    assert_eq!(on.positives, (0..16).collect::<Vec<_>>());
    assert_eq!(on.reverse, [vec![false; 8], vec![true; 8]].concat());
    assert_eq!(on.queries[..8], off.queries[..]);
    assert_eq!(on.targets[..8], off.targets[..]);
}

#[test]
fn reverse_positives_are_the_query_images() {
    let model = tiny_model(2);
    let (triplets, corpus) = ring(6, 4);
    let refs: Vec<&Triplet> = triplets.iter().collect();
    let b = build_batch(&model, &refs, &corpus, true, Variant::Full).unwrap();
    for i in 0..6 {
        assert_eq!(b.target_ids[6 + i], triplets[i].query_image);
        // triplet i - 1 targets image i, the query image of triplet i
        assert_eq!(b.targets[6 + i], b.targets[(i + 5) % 6]);
        assert_ne!(b.queries[6 + i], b.queries[i]);
    }
}

#[test]
fn shared_targets_are_masked_as_negatives() {
    let (mut triplets, corpus) = ring(4, 5);
    triplets[2].target_image = triplets[0].target_image.clone();
    let refs: Vec<&Triplet> = triplets.iter().collect();
    let plan = plan_batch(&refs, &corpus, false, Variant::Full).unwrap();
    let mask = plan.ignore_mask();
    let masked: Vec<(usize, usize)> = (0..16).filter(|&k| mask[k]).map(|k| (k / 4, k % 4)).collect();
    assert_eq!(masked, vec![(0, 2), (2, 0)]);
}

#[test]
fn missing_image_is_reported() {
    let (mut triplets, corpus) = ring(3, 6);
    triplets[1].target_image = "nowhere".into();
    let refs: Vec<&Triplet> = triplets.iter().collect();
    match plan_batch(&refs, &corpus, true, Variant::Full) {
        Err(TrainError::MissingImage { qid, image }) => assert_eq!((qid.as_str(), image.as_str()), ("q1", "nowhere")),
        other => panic!("expected MissingImage, got {:?}", other.map(|p| p.rows())),
    }
}

#[test]
fn empty_dataset_is_rejected() {
    let mut model = tiny_model(3);
    let err = train_epoch(&mut model, &[], &Corpus::default(), &cfg(1)).unwrap_err();
    assert!(err.to_string().contains("empty"), "{err}");
}

#[test]
fn training_lowers_the_loss() {
    let mut model = tiny_model(4);
    let (triplets, corpus) = ring(12, 7);
    let reports = fit(&mut model, &triplets, &corpus, &cfg(8), |_| {}).unwrap();
    assert_eq!(reports.len(), 8);
    assert!(reports.iter().all(|r| r.mean_loss.is_finite() && r.samples == 12 && r.batches == 3));
    let (first, last) = (reports[0].mean_loss, reports[7].mean_loss);
    assert!(last < first, "loss {first} -> {last}");
}

#[test]
fn surrogate_loss_trains_without_error() {
    let mut model = tiny_model(5);
    let (triplets, corpus) = ring(8, 8);
    let mut c = cfg(2);
    c.loss.variant = LossVariant::Surrogate;
    let reports = fit(&mut model, &triplets, &corpus, &c, |_| {}).unwrap();
    assert!(reports.iter().all(|r| (0.0..=1.0).contains(&r.mean_loss)));
}

#[test]
fn same_seed_gives_identical_models() {
    let (triplets, corpus) = ring(10, 9);
    let run = |seed| {
        let mut model = tiny_model(6);
        let mut c = cfg(2);
        c.seed = seed;
        let reports = fit(&mut model, &triplets, &corpus, &c, |_| {}).unwrap();
        (model.params.flatten(), reports.iter().map(|r| r.mean_loss).collect::<Vec<_>>())
    };
    let a = run(11);
    assert_eq!(a, run(11));
    assert_ne!(a.0, run(12).0);
}
