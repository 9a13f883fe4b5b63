//! Deterministic synthetic corpora: English-like prose, a distinct synthetic
//! second language, prose with injected random printable bytes, and
//! structurally disordered (shuffled) prose.
//!
//! Generation is a pure function of the spec; every document draws from its
//! own RNG stream seeded with `spec.seed ^ id`, so corpora are reproducible
//! and parallelizable per document.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Prose,
    SecondLanguage,
    RandomChars,
    Shuffled,
}

impl Mode {
    pub const ALL: [&'static str; 4] = ["prose", "second_language", "random_chars", "shuffled"];
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prose" => Ok(Mode::Prose),
            "second_language" => Ok(Mode::SecondLanguage),
            "random_chars" => Ok(Mode::RandomChars),
            "shuffled" => Ok(Mode::Shuffled),
            other => Err(Error::Spec(format!(
                "unknown mode `{other}`; valid modes: {}",
                Mode::ALL.join(", ")
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Mode::Prose => "prose",
            Mode::SecondLanguage => "second_language",
            Mode::RandomChars => "random_chars",
            Mode::Shuffled => "shuffled",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShuffleUnit {
    Sentence,
    Word,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub seed: u64,
    pub n_documents: usize,
    /// Inclusive byte-token length bounds per document.
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub mode: Mode,
    /// Fraction of positions replaced by random printable bytes (random_chars).
    pub injection_rate: f64,
    /// Segment granularity for shuffled mode.
    pub shuffle_unit: ShuffleUnit,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 0,
            n_documents: 100,
            min_tokens: 64,
            max_tokens: 256,
            mode: Mode::Prose,
            injection_rate: 0.05,
            shuffle_unit: ShuffleUnit::Sentence,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::Spec(format!(
                "need 1 <= min_tokens <= max_tokens, got {}..{}",
                self.min_tokens, self.max_tokens
            )));
        }
        if !(0.0..=1.0).contains(&self.injection_rate) {
            return Err(Error::Spec(format!(
                "injection_rate {} outside [0, 1]",
                self.injection_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: u64,
    pub mode: Mode,
    pub text: String,
    /// Byte-token count; equals text length under the byte tokenizer.
    #[serde(skip, default)]
    pub token_count: usize,
}

const WORDS: &[&str] = &[
    "the", "a", "river", "stone", "light", "old", "garden", "wind", "quiet", "morning", "bird",
    "letter", "small", "road", "winter", "house", "dark", "paper", "clock", "dust", "green",
    "voice", "door", "slow", "field", "rain", "warm", "table", "lamp", "bridge", "early", "glass",
    "near", "water", "long", "shadow", "walked", "turned", "found", "carried", "opened", "under",
    "between", "toward", "beside", "again", "still", "almost", "every", "other",
];

// disjoint syllable inventory, standing in for a second written language
const SYLLABLES: &[&str] = &[
    "ka", "ri", "to", "mu", "se", "no", "ha", "ki", "ru", "ta", "mi", "so", "ne", "ho", "ku",
    "ra", "tsu", "me", "yo", "shi",
];

fn prose_sentence(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(6..=14);
    let mut s = String::new();
    for i in 0..n {
        let w = WORDS[rng.gen_range(0..WORDS.len())];
        if i == 0 {
            let mut c = w.chars();
            let first = c.next().unwrap().to_ascii_uppercase();
            s.push(first);
            s.push_str(c.as_str());
        } else {
            s.push(' ');
            s.push_str(w);
        }
    }
    s.push_str(". ");
    s
}

fn second_language_sentence(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(4..=9);
    let mut s = String::new();
    for i in 0..n {
        if i > 0 {
            s.push(' ');
        }
        for _ in 0..rng.gen_range(2..=4) {
            s.push_str(SYLLABLES[rng.gen_range(0..SYLLABLES.len())]);
        }
    }
    s.push_str(". ");
    s
}

/// Base prose (or second-language) text of exactly `target` bytes.
fn base_text(rng: &mut ChaCha8Rng, target: usize, second_language: bool) -> String {
    let mut text = String::with_capacity(target + 32);
    while text.len() < target {
        let s = if second_language {
            second_language_sentence(rng)
        } else {
            prose_sentence(rng)
        };
        text.push_str(&s);
    }
    text.truncate(target); // ASCII only, safe at any byte
    text
}

fn generate_one(spec: &CorpusSpec, id: u64) -> Document {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ id);
    let target = rng.gen_range(spec.min_tokens..=spec.max_tokens);
    let mut text = base_text(&mut rng, target, spec.mode == Mode::SecondLanguage);
    match spec.mode {
        Mode::Prose | Mode::SecondLanguage => {}
        Mode::RandomChars => {
            if spec.injection_rate > 0.0 {
                let mut bytes = text.into_bytes();
                for b in &mut bytes {
                    if rng.gen_bool(spec.injection_rate) {
                        *b = rng.gen_range(0x20u8..=0x7e);
                    }
                }
                text = String::from_utf8(bytes).expect("printable ASCII");
            }
        }
        Mode::Shuffled => {
            // segments keep their delimiters, so the byte length and the
            // segment multiset are preserved exactly
            let segments: Vec<String> = match spec.shuffle_unit {
                ShuffleUnit::Sentence => split_inclusive(&text, ". "),
                ShuffleUnit::Word => split_inclusive(&text, " "),
            };
            // the truncated tail segment has no trailing delimiter; keep it
            // last so re-splitting the shuffled text recovers the segments
            let delim = match spec.shuffle_unit {
                ShuffleUnit::Sentence => ". ",
                ShuffleUnit::Word => " ",
            };
            let movable = if segments.last().is_some_and(|s| s.ends_with(delim)) {
                segments.len()
            } else {
                segments.len().saturating_sub(1)
            };
            let mut order: Vec<usize> = (0..segments.len()).collect();
            // Fisher-Yates with the document's own stream
            for i in (1..movable).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            text = order.into_iter().map(|i| segments[i].as_str()).collect();
        }
    }
    let token_count = text.len();
    Document {
        id,
        mode: spec.mode,
        text,
        token_count,
    }
}

/// Split keeping the delimiter attached to the preceding segment.
pub fn split_inclusive(text: &str, delim: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(pos) = rest.find(delim) {
        let end = pos + delim.len();
        out.push(rest[..end].to_string());
        rest = &rest[end..];
    }
    if !rest.is_empty() {
        out.push(rest.to_string());
    }
    out
}

/// Generate the full corpus described by the spec.
pub fn generate(spec: &CorpusSpec) -> Result<Vec<Document>> {
    spec.validate()?;
    Ok((0..spec.n_documents as u64)
        .map(|id| generate_one(spec, id))
        .collect())
}

/// Seed-deterministic disjoint, exhaustive train/eval split.
pub fn split(
    corpus: &[Document],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<Document>, Vec<Document>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Spec(format!(
            "train_fraction {train_fraction} outside (0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = (corpus.len() as f64 * train_fraction).floor() as usize;
    if n_train == 0 || n_train == corpus.len() {
        return Err(Error::Spec(format!(
            "split of {} docs at {train_fraction} leaves one side empty",
            corpus.len()
        )));
    }
    let train = order[..n_train].iter().map(|&i| corpus[i].clone()).collect();
    let eval = order[n_train..].iter().map(|&i| corpus[i].clone()).collect();
    Ok((train, eval))
}

/// Write a corpus as JSON lines: one `{id, mode, text}` object per line.
pub fn write_jsonl(docs: &[Document], path: &Path) -> Result<()> {
    let err = |e| Error::io(path.display().to_string(), e);
    let mut w = BufWriter::new(std::fs::File::create(path).map_err(err)?);
    for doc in docs {
        serde_json::to_writer(&mut w, doc).map_err(|e| err(e.into()))?;
        w.write_all(b"\n").map_err(err)?;
    }
    w.flush().map_err(err)
}

/// Read a JSON-lines corpus; token counts are recomputed from the text.
pub fn read_jsonl(path: &Path) -> Result<Vec<Document>> {
    let err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let file = std::fs::File::open(path).map_err(err)?;
    let mut docs = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(err)?;
        if line.trim().is_empty() {
            continue;
        }
        let mut doc: Document = serde_json::from_str(&line)
            .map_err(|e| Error::Spec(format!("{}: bad corpus line: {e}", path.display())))?;
        doc.token_count = doc.text.len();
        docs.push(doc);
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(mode: Mode) -> CorpusSpec {
        CorpusSpec {
            seed: 1,
            n_documents: 10,
            min_tokens: 64,
            max_tokens: 256,
            mode,
            injection_rate: 0.1,
            shuffle_unit: ShuffleUnit::Sentence,
        }
    }

    #[test]
    fn same_spec_twice_is_identical() {
        for mode in [Mode::Prose, Mode::SecondLanguage, Mode::RandomChars, Mode::Shuffled] {
            let s = spec(mode);
            assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
        }
    }

    #[test]
    fn lengths_respect_bounds_in_every_mode() {
        for mode in [Mode::Prose, Mode::SecondLanguage, Mode::RandomChars, Mode::Shuffled] {
            for doc in generate(&spec(mode)).unwrap() {
                assert!((64..=256).contains(&doc.token_count), "{mode}: {}", doc.token_count);
                assert_eq!(doc.token_count, doc.text.len());
            }
        }
    }

    #[test]
    fn zero_injection_rate_degenerates_to_prose() {
        let mut s = spec(Mode::RandomChars);
        s.injection_rate = 0.0;
        let injected = generate(&s).unwrap();
        s.mode = Mode::Prose;
        let prose = generate(&s).unwrap();
        for (a, b) in injected.iter().zip(&prose) {
            assert_eq!(a.text, b.text);
        }
    }

    #[test]
    fn positive_injection_rate_changes_bytes() {
        let s = spec(Mode::RandomChars);
        let injected = generate(&s).unwrap();
        let mut p = s.clone();
        p.mode = Mode::Prose;
        let prose = generate(&p).unwrap();
        assert!(injected.iter().zip(&prose).any(|(a, b)| a.text != b.text));
    }

    #[test]
    fn shuffled_preserves_segment_multiset_and_length() {
        for unit in [ShuffleUnit::Sentence, ShuffleUnit::Word] {
            let mut s = spec(Mode::Shuffled);
            s.shuffle_unit = unit;
            let shuffled = generate(&s).unwrap();
            let mut p = s.clone();
            p.mode = Mode::Prose;
            let prose = generate(&p).unwrap();
            let delim = match unit {
                ShuffleUnit::Sentence => ". ",
                ShuffleUnit::Word => " ",
            };
            for (a, b) in shuffled.iter().zip(&prose) {
                assert_eq!(a.text.len(), b.text.len());
                let mut sa = split_inclusive(&a.text, delim);
                let mut sb = split_inclusive(&b.text, delim);
                sa.sort();
                sb.sort();
                assert_eq!(sa, sb);
            }
        }
    }

    #[test]
    fn second_language_uses_a_distinct_distribution() {
        let sl = generate(&spec(Mode::SecondLanguage)).unwrap();
        // no English function words appear as standalone words
        for doc in &sl {
            assert!(!doc.text.contains(" the "), "{}", doc.text);
        }
    }

    #[test]
    fn invalid_bounds_are_spec_errors() {
        let mut s = spec(Mode::Prose);
        s.min_tokens = 300;
        assert!(matches!(generate(&s), Err(Error::Spec(_))));
        s.min_tokens = 0;
        assert!(generate(&s).is_err());
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_deterministic() {
        let mut s = spec(Mode::Prose);
        s.n_documents = 100;
        let docs = generate(&s).unwrap();
        let (train, eval) = split(&docs, 0.8, 42).unwrap();
        assert_eq!(train.len(), 80);
        assert_eq!(eval.len(), 20);
        let mut ids: Vec<u64> = train.iter().chain(&eval).map(|d| d.id).collect();
        ids.sort();
        assert_eq!(ids, (0..100).collect::<Vec<u64>>());
        let (train2, eval2) = split(&docs, 0.8, 42).unwrap();
        assert_eq!(train, train2);
        assert_eq!(eval, eval2);
    }

    #[test]
    fn degenerate_split_is_an_error() {
        let docs = generate(&spec(Mode::Prose)).unwrap();
        assert!(split(&docs, 0.01, 1).is_err()); // empty train side
        assert!(split(&docs, 1.5, 1).is_err());
        assert!(split(&docs, 0.0, 1).is_err());
    }

    #[test]
    fn jsonl_round_trips_mode_labels() {
        let dir = tempfile::tempdir().unwrap();
        let docs = generate(&spec(Mode::Shuffled)).unwrap();
        let path = dir.path().join("corpus.jsonl");
        write_jsonl(&docs, &path).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(docs, back);
        let raw = std::fs::read_to_string(&path).unwrap();
        assert_eq!(raw.lines().count(), docs.len());
        assert!(raw.lines().next().unwrap().contains("\"shuffled\""));
    }
}
