use std::collections::HashSet;

use super::Triplet;
use crate::rng::SplitMix64;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitResult {
    pub train_images: Vec<String>,
    pub val_images: Vec<String>,
    pub train: Vec<Triplet>,
    pub val: Vec<Triplet>,
    /// Triplets with one image in each split.
    pub dropped: Vec<Triplet>,
}

/// Splits by image id: `round(n · val_fraction)` shuffled images go to val.
/// A triplet is kept only if both of its images fall on the same side.
pub fn split(triplets: &[Triplet], image_ids: &[String], val_fraction: f64, seed: u64) -> SplitResult {
    let mut ids = image_ids.to_vec();
    ids.sort();
    ids.dedup();
    SplitMix64::new(seed).shuffle(&mut ids);
    let n_val = ((ids.len() as f64) * val_fraction.clamp(0.0, 1.0)).round() as usize;
    let val_images: Vec<String> = ids[..n_val].to_vec();
    let train_images: Vec<String> = ids[n_val..].to_vec();
    let val_set: HashSet<&str> = val_images.iter().map(String::as_str).collect();

    let mut out = SplitResult {
        train_images,
        val_images: val_images.clone(),
        ..SplitResult::default()
    };
    for t in triplets {
        match (val_set.contains(t.query_image.as_str()), val_set.contains(t.target_image.as_str())) {
            (true, true) => out.val.push(t.clone()),
            (false, false) => out.train.push(t.clone()),
            _ => out.dropped.push(t.clone()),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(q: &str, tg: &str) -> Triplet {
        Triplet {
            qid: format!("{q}-{tg}"),
            query_image: q.into(),
            query_text: "x".into(),
            target_image: tg.into(),
            subset: None,
            category: None,
            caption: None,
        }
    }

    #[test]
    fn ninety_two_eight() {
        let ids: Vec<String> = (0..100).map(|i| format!("i{i}")).collect();
        let s = split(&[], &ids, 0.08, 3);
        assert_eq!((s.train_images.len(), s.val_images.len()), (92, 8));
        let train: HashSet<_> = s.train_images.iter().collect();
        assert!(s.val_images.iter().all(|i| !train.contains(i)));
    }

    #[test]
    fn straddling_triplets_dropped() {
        let ids: Vec<String> = (0..10).map(|i| i.to_string()).collect();
        let s = split(&[], &ids, 0.3, 9);
        let v = &s.val_images;
        let tr = &s.train_images;
        let triplets = vec![
            t(&v[0], &v[1]),
            t(&v[1], &tr[0]),
            t(&tr[0], &tr[1]),
            t(&tr[2], &v[2]),
            t(&tr[3], &tr[4]),
        ];
        let s2 = split(&triplets, &ids, 0.3, 9);
        assert_eq!((s2.val.len(), s2.train.len(), s2.dropped.len()), (1, 2, 2));
    }
}
