use std::path::PathBuf;

use coir_core::datasets::{encode_jsonl, parse_triplets};
use coir_core::roaming::{
    dataset_stats, filter_text, parse_vqa, roam, ClientError, CompletionClient, MockClient, RetryPolicy, RoamConfig,
};
use proptest::prelude::*;

fn read(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/roaming").join(name);
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn mock_run_reproduces_golden_triplets() {
    let pairs = parse_vqa(&read("pairs.json"), "pairs.json").unwrap();
    let mock = MockClient::parse(&read("mock.json")).unwrap();
    let out = roam(&pairs, &mock, &RoamConfig::default()).unwrap();
    assert_eq!(encode_jsonl(&out.triplets), read("golden_triplets.jsonl").into_bytes());
    assert_eq!(out.audit.len(), 2 * pairs.len());
    assert_eq!(out.failures().count(), 4);
}

#[test]
fn stats_of_ten_golden_triplets() {
    let all = parse_triplets(&read("golden_triplets.jsonl"), "golden").unwrap();
    let s = dataset_stats(&all[..10], 20, 7);
    assert_eq!((s.triplets, s.train_corpus, s.val_corpus), (10, 20, 7));
    // counted independently from the fixture text
    assert_eq!(s.unique_tokens, 41);
    assert!((s.avg_text_chars.0 - 32.2).abs() < 1e-12);
    assert!((s.avg_text_tokens.0 - 7.3).abs() < 1e-12);
    assert_eq!(
        s.to_csv(),
        "triplets,train_corpus,val_corpus,unique_tokens,avg_text_chars,avg_text_tokens\n10,20,7,41,32.20,7.30\n"
    );
}

struct Down;

impl CompletionClient for Down {
    fn complete(&self, _: &str) -> Result<String, ClientError> {
        Err(ClientError::Transport("connection refused".into()))
    }
}

#[test]
fn unreachable_backend_skips_every_pair() {
    let pairs = parse_vqa(&read("pairs.json"), "pairs.json").unwrap();
    let cfg = RoamConfig {
        retry: RetryPolicy {
            max_attempts: 2,
            initial_backoff_ms: 0,
            multiplier: 1.0,
        },
        ..RoamConfig::default()
    };
    let out = roam(&pairs, &Down, &cfg).unwrap();
    assert!(out.triplets.is_empty());
    assert_eq!(out.failures().count(), 2 * pairs.len());
}

proptest! {
    #[test]
    fn filter_rejects_exactly_the_violated_rules(s in "[a-zA-Z =:\t]{0,40}") {
        let cfg = RoamConfig { min_len: 5, max_len: 30, ..RoamConfig::default() };
        let n = s.chars().count();
        let forbidden = cfg.forbidden.iter().filter(|f| s.contains(f.as_str())).count();
        let want = usize::from(n < 5) + usize::from(n > 30) + forbidden;
        prop_assert_eq!(filter_text(&s, &cfg).len(), want);
    }
}
