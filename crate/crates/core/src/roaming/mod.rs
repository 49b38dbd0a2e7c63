//! VQA-to-retrieval data roaming: complementary question/answer pairs are
//! rephrased into transition texts by a completion model, filtered, and
//! emitted as triplets in both directions.

mod client;

use std::collections::BTreeSet;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use client::{ClientError, CompletionClient, HttpClient, MockClient, MockEntry, ENDPOINT_VAR, KEY_VAR};

use crate::datasets::Triplet;
use crate::metrics::Pct;
use crate::model::tokenizer::words;
use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum RoamError {
    #[error("{0}")]
    Contract(String),
    #[error("{path}: record {record}: {reason}")]
    Ingest {
        path: String,
        record: usize,
        reason: String,
    },
    #[error("completion failed after {attempts} attempt(s): {source}")]
    Client { attempts: usize, source: ClientError },
    #[error("empty completion")]
    EmptyCompletion,
}

pub type Result<T> = std::result::Result<T, RoamError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaPair {
    pub image_id: String,
    pub question: String,
    pub answer: String,
}

/// Same question asked of two images with different answers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplementaryPair {
    pub id: String,
    pub original: VqaPair,
    pub complement: VqaPair,
}

impl ComplementaryPair {
    /// Shared image ids are allowed here; `roam` drops them.
    pub fn validate(&self) -> std::result::Result<(), String> {
        for (name, v) in [
            ("image_id", &self.original.image_id),
            ("question", &self.original.question),
            ("answer", &self.original.answer),
            ("complement_image_id", &self.complement.image_id),
            ("complement_answer", &self.complement.answer),
        ] {
            if v.trim().is_empty() {
                return Err(format!("{name} is empty"));
            }
        }
        if self.original.question != self.complement.question {
            return Err("complement asks a different question".into());
        }
        if self.original.answer == self.complement.answer {
            return Err("answers must differ".into());
        }
        Ok(())
    }
}

/// One input record of the VQA JSON array.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqaRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub image_id: String,
    pub question: String,
    pub answer: String,
    pub complement_image_id: String,
    pub complement_answer: String,
}

/// Parses and validates a VQA JSON array; records without an `id` are
/// named `pair-<index>`.
pub fn parse_vqa(json: &str, path: &str) -> Result<Vec<ComplementaryPair>> {
    let records: Vec<VqaRecord> = serde_json::from_str(json).map_err(|e| RoamError::Ingest {
        path: path.into(),
        record: 0,
        reason: format!("line {} column {}: {e}", e.line(), e.column()),
    })?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        let pair = ComplementaryPair {
            id: r.id.unwrap_or_else(|| format!("pair-{i:05}")),
            original: VqaPair {
                image_id: r.image_id,
                question: r.question.clone(),
                answer: r.answer,
            },
            complement: VqaPair {
                image_id: r.complement_image_id,
                question: r.question,
                answer: r.complement_answer,
            },
        };
        let fail = |reason: String| RoamError::Ingest {
            path: path.into(),
            record: i,
            reason,
        };
        pair.validate().map_err(fail)?;
        if !seen.insert(pair.id.clone()) {
            return Err(fail(format!("duplicate id {:?}", pair.id)));
        }
        out.push(pair);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptExample {
    pub question: String,
    pub answer: String,
    pub text: String,
}

pub const PROMPT_HEADER: &str = "Rephrase the following texts:";

/// Header line, then one `"Q A" = "S"` line per example, then the open
/// query line `"Q A" =`. Lines are joined by `\n`; no trailing newline.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub header: String,
    pub examples: Vec<PromptExample>,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        let e = |q: &str, a: &str, t: &str| PromptExample {
            question: q.into(),
            answer: a.into(),
            text: t.into(),
        };
        Self {
            header: PROMPT_HEADER.into(),
            examples: vec![
                e("Are there any humans visible in the photo?", "yes", "Add some people to the photo"),
                e("Is there a square on the doors?", "yes", "Find a door with a square on top of it"),
                e("What color is the man's tie?", "blue", "Change the color of the tie of the man to be blue"),
            ],
        }
    }
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.header != PROMPT_HEADER {
            return Err(RoamError::Contract(format!("prompt header must be {PROMPT_HEADER:?}")));
        }
        if self.examples.is_empty() {
            return Err(RoamError::Contract("prompt template needs at least one example".into()));
        }
        Ok(())
    }
}

pub fn build_prompt(template: &PromptTemplate, question: &str, answer: &str) -> Result<String> {
    template.validate()?;
    if question.trim().is_empty() || answer.trim().is_empty() {
        return Err(RoamError::Contract("question and answer must be non-empty".into()));
    }
    let mut out = template.header.clone();
    for e in &template.examples {
        out.push_str(&format!("\n\"{} {}\" = \"{}\"", e.question, e.answer, e.text));
    }
    out.push_str(&format!("\n\"{question} {answer}\" ="));
    Ok(out)
}

/// Trims whitespace, removes one pair of matching surrounding quotes
/// (`"…"`, `'…'` or `“…”`), and trims again.
pub fn clean_completion(raw: &str) -> String {
    let s = raw.trim();
    let inner = [('"', '"'), ('\'', '\''), ('\u{201c}', '\u{201d}')]
        .iter()
        .find_map(|&(open, close)| {
            s.strip_prefix(open)
                .and_then(|r| r.strip_suffix(close))
        })
        .unwrap_or(s);
    inner.trim().to_string()
}

/// Attempts and exponential backoff for retryable client failures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: usize,
    pub initial_backoff_ms: u64,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            initial_backoff_ms: 500,
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, attempt: usize) -> Duration {
        let ms = self.initial_backoff_ms as f64 * self.multiplier.powi(attempt as i32);
        Duration::from_millis(ms as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rephrasing {
    pub text: String,
    pub raw: String,
}

pub fn rephrase(client: &dyn CompletionClient, prompt: &str, retry: &RetryPolicy) -> Result<Rephrasing> {
    let attempts = retry.max_attempts.max(1);
    let mut attempt = 0;
    loop {
        match client.complete(prompt) {
            Ok(raw) => {
                let text = clean_completion(&raw);
                if text.is_empty() {
                    return Err(RoamError::EmptyCompletion);
                }
                return Ok(Rephrasing { text, raw });
            }
            Err(e) if e.is_retryable() && attempt + 1 < attempts => {
                log::warn!("completion attempt {} failed: {e}", attempt + 1);
                std::thread::sleep(retry.backoff(attempt));
                attempt += 1;
            }
            Err(source) => {
                return Err(RoamError::Client {
                    attempts: attempt + 1,
                    source,
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoamConfig {
    pub min_len: usize,
    pub max_len: usize,
    pub forbidden: Vec<String>,
    pub symmetry: bool,
    pub template: PromptTemplate,
    pub retry: RetryPolicy,
}

impl Default for RoamConfig {
    fn default() -> Self {
        Self {
            min_len: 10,
            max_len: 200,
            forbidden: ["\n", "\t", "=", "Q:"].map(String::from).to_vec(),
            symmetry: true,
            template: PromptTemplate::default(),
            retry: RetryPolicy::default(),
        }
    }
}

impl RoamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_len >= self.max_len {
            return Err(RoamError::Contract("min_len must be below max_len".into()));
        }
        self.template.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Rejection {
    TooShort { len: usize, min: usize },
    TooLong { len: usize, max: usize },
    Forbidden { substring: String },
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rejection::TooShort { len, min } => write!(f, "too short ({len} < {min} chars)"),
            Rejection::TooLong { len, max } => write!(f, "too long ({len} > {max} chars)"),
            Rejection::Forbidden { substring } => write!(f, "forbidden substring {substring:?}"),
        }
    }
}

/// Every rule `s` violates; empty means keep. Lengths count characters.
pub fn filter_text(s: &str, cfg: &RoamConfig) -> Vec<Rejection> {
    let len = s.chars().count();
    let mut out = Vec::new();
    if len < cfg.min_len {
        out.push(Rejection::TooShort { len, min: cfg.min_len });
    }
    if len > cfg.max_len {
        out.push(Rejection::TooLong { len, max: cfg.max_len });
    }
    out.extend(
        cfg.forbidden
            .iter()
            .filter(|f| s.contains(f.as_str()))
            .map(|f| Rejection::Forbidden { substring: f.clone() }),
    );
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// (I, S_c, I_c) from (Q, A_c).
    Forward,
    /// (I_c, S, I) from (Q, A).
    Symmetric,
}

/// One audit record per attempted conversion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub pair: String,
    pub direction: Direction,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub kept: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub reasons: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoamOutput {
    pub triplets: Vec<Triplet>,
    pub audit: Vec<AuditEntry>,
}

impl RoamOutput {
    pub fn failures(&self) -> impl Iterator<Item = &AuditEntry> {
        self.audit.iter().filter(|a| !a.kept)
    }
}

fn convert(
    pair: &ComplementaryPair,
    direction: Direction,
    client: &dyn CompletionClient,
    cfg: &RoamConfig,
) -> (Option<Triplet>, AuditEntry) {
    let (from, to) = match direction {
        Direction::Forward => (&pair.original, &pair.complement),
        Direction::Symmetric => (&pair.complement, &pair.original),
    };
    let suffix = match direction {
        Direction::Forward => "fwd",
        Direction::Symmetric => "sym",
    };
    let mut audit = AuditEntry {
        pair: pair.id.clone(),
        direction,
        prompt: None,
        raw: None,
        text: None,
        kept: false,
        reasons: Vec::new(),
    };
    if from.image_id == to.image_id {
        audit.reasons.push("query and target share the same image".into());
        return (None, audit);
    }
    let prompt = match build_prompt(&cfg.template, &pair.original.question, &to.answer) {
        Ok(p) => p,
        Err(e) => {
            audit.reasons.push(e.to_string());
            return (None, audit);
        }
    };
    let result = rephrase(client, &prompt, &cfg.retry);
    audit.prompt = Some(prompt);
    match result {
        Ok(r) => {
            audit.raw = Some(r.raw);
            let rejected = filter_text(&r.text, cfg);
            audit.text = Some(r.text.clone());
            if !rejected.is_empty() {
                audit.reasons = rejected.iter().map(ToString::to_string).collect();
                return (None, audit);
            }
            audit.kept = true;
            let t = Triplet {
                qid: format!("{}-{suffix}", pair.id),
                query_image: from.image_id.clone(),
                query_text: r.text,
                target_image: to.image_id.clone(),
                subset: None,
                category: None,
                caption: None,
            };
            (Some(t), audit)
        }
        Err(e) => {
            log::warn!("pair {}: {e}", pair.id);
            audit.reasons.push(e.to_string());
            (None, audit)
        }
    }
}

/// Converts every pair (and, with symmetry, its reverse) into triplets in
/// input order. Failed conversions are logged in the audit and skipped.
pub fn roam(pairs: &[ComplementaryPair], client: &dyn CompletionClient, cfg: &RoamConfig) -> Result<RoamOutput> {
    cfg.validate()?;
    let mut jobs = Vec::with_capacity(pairs.len() * 2);
    for p in pairs {
        jobs.push((p, Direction::Forward));
        if cfg.symmetry {
            jobs.push((p, Direction::Symmetric));
        }
    }
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(p, d)| convert(p, d, client, cfg))
        .collect();
    let mut out = RoamOutput::default();
    for (t, a) in results {
        out.triplets.extend(t);
        out.audit.push(a);
    }
    Ok(out)
}

/// Corpus-level statistics in the layout of a dataset summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub triplets: usize,
    pub train_corpus: usize,
    pub val_corpus: usize,
    pub unique_tokens: usize,
    pub avg_text_chars: Pct,
    pub avg_text_tokens: Pct,
}

pub fn dataset_stats(triplets: &[Triplet], train_corpus: usize, val_corpus: usize) -> StatsReport {
    let mut vocab = BTreeSet::new();
    let mut chars = 0usize;
    let mut tokens = 0usize;
    for t in triplets {
        let w = words(&t.query_text);
        chars += t.query_text.chars().count();
        tokens += w.len();
        vocab.extend(w);
    }
    let avg = |x: usize| if triplets.is_empty() { 0.0 } else { x as f64 / triplets.len() as f64 };
    StatsReport {
        triplets: triplets.len(),
        train_corpus,
        val_corpus,
        unique_tokens: vocab.len(),
        avg_text_chars: Pct(avg(chars)),
        avg_text_tokens: Pct(avg(tokens)),
    }
}

impl StatsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("stats serialize");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["triplets", "train_corpus", "val_corpus", "unique_tokens", "avg_text_chars", "avg_text_tokens"])
            .expect("in-memory write");
        w.write_record([
            self.triplets.to_string(),
            self.train_corpus.to_string(),
            self.val_corpus.to_string(),
            self.unique_tokens.to_string(),
            self.avg_text_chars.to_string(),
            self.avg_text_tokens.to_string(),
        ])
        .expect("in-memory write");
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }
}

/// `n` triplets drawn without replacement, as a CSV review sheet with an
/// empty `well_phrased` column for a human rater.
pub fn sample_sheet(triplets: &[Triplet], n: usize, seed: u64) -> String {
    let mut idx: Vec<usize> = (0..triplets.len()).collect();
    SplitMix64::new(seed).shuffle(&mut idx);
    idx.truncate(n);
    idx.sort_unstable();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["qid", "query_image", "query_text", "target_image", "well_phrased"])
        .expect("in-memory write");
    for i in idx {
        let t = &triplets[i];
        w.write_record([&t.qid, &t.query_image, &t.query_text, &t.target_image, ""])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    const SKY_PROMPT: &str = "Rephrase the following texts:\n\
\"Are there any humans visible in the photo? yes\" = \"Add some people to the photo\"\n\
\"Is there a square on the doors? yes\" = \"Find a door with a square on top of it\"\n\
\"What color is the man's tie? blue\" = \"Change the color of the tie of the man to be blue\"\n\
\"Is the sky cloudy? yes\" =";

    fn pair(id: &str, i: &str, ic: &str, q: &str, a: &str, ac: &str) -> ComplementaryPair {
        ComplementaryPair {
            id: id.into(),
            original: VqaPair {
                image_id: i.into(),
                question: q.into(),
                answer: a.into(),
            },
            complement: VqaPair {
                image_id: ic.into(),
                question: q.into(),
                answer: ac.into(),
            },
        }
    }

    #[test]
    fn prompt_matches_worked_example() {
        let p = build_prompt(&PromptTemplate::default(), "Is the sky cloudy?", "yes").unwrap();
        assert_eq!(p, SKY_PROMPT);
    }

    #[test]
    fn prompt_contract() {
        let mut t = PromptTemplate::default();
        assert!(build_prompt(&t, "", "yes").is_err());
        assert!(build_prompt(&t, "Q?", " ").is_err());
        t.examples.clear();
        assert!(matches!(build_prompt(&t, "Q?", "a"), Err(RoamError::Contract(_))));
        let t = PromptTemplate {
            header: "Paraphrase:".into(),
            ..PromptTemplate::default()
        };
        assert!(build_prompt(&t, "Q?", "a").is_err());
    }

    #[test]
    fn mock_rephrasings() {
        let m = MockClient::examples();
        let t = PromptTemplate::default();
        let r = RetryPolicy::default();
        for (q, a, s) in [
            ("Is the sky cloudy?", "yes", "Make the sky cloudy"),
            ("What color is the man's tie?", "blue", "Change the color of the tie of the man to be blue"),
            ("Are there any humans visible in the photo?", "yes", "Add some people to the photo"),
        ] {
            let out = rephrase(&m, &build_prompt(&t, q, a).unwrap(), &r).unwrap();
            assert_eq!(out.text, s);
            assert_eq!(out.raw, format!(" \"{s}\""));
        }
    }

    #[test]
    fn cleaning_rules() {
        assert_eq!(clean_completion("  \"Make it red\" \n"), "Make it red");
        assert_eq!(clean_completion("'Make it red'"), "Make it red");
        assert_eq!(clean_completion("\u{201c} Make it red \u{201d}"), "Make it red");
        assert_eq!(clean_completion("\"unbalanced"), "\"unbalanced");
        assert_eq!(clean_completion("\"\"\"x\"\"\""), "\"\"x\"\"");
    }

    struct Flaky {
        fails: usize,
        calls: AtomicUsize,
        retryable: bool,
    }

    impl CompletionClient for Flaky {
        fn complete(&self, _: &str) -> std::result::Result<String, ClientError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fails {
                return Err(if self.retryable {
                    ClientError::Transport("reset".into())
                } else {
                    ClientError::Http {
                        status: 401,
                        body: "no".into(),
                    }
                });
            }
            Ok("  ".into())
        }
    }

    #[test]
    fn retry_is_bounded() {
        let fast = RetryPolicy {
            max_attempts: 3,
            initial_backoff_ms: 0,
            multiplier: 2.0,
        };
        let c = Flaky {
            fails: 2,
            calls: AtomicUsize::new(0),
            retryable: true,
        };
        assert!(matches!(rephrase(&c, "p", &fast), Err(RoamError::EmptyCompletion)));
        assert_eq!(c.calls.load(Ordering::SeqCst), 3);
        let c = Flaky {
            fails: 5,
            calls: AtomicUsize::new(0),
            retryable: true,
        };
        assert!(matches!(rephrase(&c, "p", &fast), Err(RoamError::Client { attempts: 3, .. })));
        let c = Flaky {
            fails: 5,
            calls: AtomicUsize::new(0),
            retryable: false,
        };
        assert!(matches!(rephrase(&c, "p", &fast), Err(RoamError::Client { attempts: 1, .. })));
        assert_eq!(RetryPolicy::default().backoff(2), Duration::from_millis(2000));
    }

    #[test]
    fn filter_examples() {
        let cfg = RoamConfig::default();
        assert!(filter_text("Make the sky cloudy", &cfg).is_empty());
        assert_eq!(filter_text("ok", &cfg), [Rejection::TooShort { len: 2, min: 10 }]);
        assert_eq!(
            filter_text("line1\nline2", &cfg),
            [Rejection::Forbidden { substring: "\n".into() }]
        );
        let long = "x".repeat(201);
        assert!(matches!(filter_text(&long, &cfg)[..], [Rejection::TooLong { len: 201, max: 200 }]));
        assert_eq!(filter_text("Q: a=b", &cfg).len(), 3);
    }

    #[test]
    fn symmetry_doubles_and_same_image_drops() {
        let m = MockClient::examples();
        let cfg = RoamConfig::default();
        let out = roam(&[pair("p", "a", "b", "Is the sky cloudy?", "no", "yes")], &m, &cfg).unwrap();
        assert_eq!(out.triplets.len(), 2);
        assert_eq!(
            (out.triplets[0].query_image.as_str(), out.triplets[0].query_text.as_str(), out.triplets[0].target_image.as_str()),
            ("a", "Make the sky cloudy", "b")
        );
        assert_eq!((out.triplets[1].query_image.as_str(), out.triplets[1].target_image.as_str()), ("b", "a"));
        let out = roam(&[pair("p", "a", "a", "Is the sky cloudy?", "no", "yes")], &m, &cfg).unwrap();
        assert!(out.triplets.is_empty());
        assert_eq!(out.failures().count(), 2);
        assert!(out.audit[0].reasons[0].contains("same image"));
        let cfg = RoamConfig {
            symmetry: false,
            ..RoamConfig::default()
        };
        let out = roam(&[pair("p", "a", "b", "Is the sky cloudy?", "no", "yes")], &m, &cfg).unwrap();
        assert_eq!(out.triplets.len(), 1);
    }

    #[test]
    fn vqa_ingestion() {
        let json = r#"[{"image_id":"1","question":"Is it red?","answer":"yes","complement_image_id":"2","complement_answer":"no"}]"#;
        let p = parse_vqa(json, "v.json").unwrap();
        assert_eq!(p[0].id, "pair-00000");
        assert_eq!(p[0].complement.question, "Is it red?");
        let same = json.replace("\"no\"", "\"yes\"");
        assert!(matches!(parse_vqa(&same, "v.json"), Err(RoamError::Ingest { record: 0, .. })));
        assert!(parse_vqa(&json.replace("\"answer\"", "\"extra\":1,\"answer\""), "v.json").is_err());
    }

    #[test]
    fn stats_of_empty_set_are_zero() {
        let s = dataset_stats(&[], 0, 0);
        assert_eq!(s.triplets + s.unique_tokens + s.train_corpus + s.val_corpus, 0);
        assert_eq!((s.avg_text_chars.0, s.avg_text_tokens.0), (0.0, 0.0));
    }

    #[test]
    fn sample_sheet_is_deterministic_subset() {
        let m = MockClient::examples();
        let pairs: Vec<_> = (0..5)
            .map(|i| pair(&format!("p{i}"), &format!("a{i}"), &format!("b{i}"), "Is the sky cloudy?", "no", "yes"))
            .collect();
        let out = roam(&pairs, &m, &RoamConfig::default()).unwrap();
        let a = sample_sheet(&out.triplets, 4, 9);
        assert_eq!(a, sample_sheet(&out.triplets, 4, 9));
        assert_eq!(a.lines().count(), 5);
        assert!(a.starts_with("qid,query_image,query_text,target_image,well_phrased\n"));
    }
}
