//! Deterministic synthetic text corpora and JSONL ingest.
//!
//! Experiments need reproducible data with two clearly separated styles so
//! out-of-distribution behavior is observable. Everything is generated from a
//! seed; no external data is fetched.

use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Which template family to draw sentences from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Style {
    Medical,
    Code,
}

const SYMPTOMS: &[&str] = &[
    "a mild headache",
    "persistent lower back pain",
    "shortness of breath",
    "intermittent chest tightness",
    "numbness in the left hand",
    "a dry cough",
    "dizziness on standing",
    "swelling around the ankles",
    "blurred vision",
    "fatigue after meals",
];

const DURATIONS: &[&str] = &[
    "three days",
    "two weeks",
    "several months",
    "one night",
    "five hours",
    "a full year",
    "ten days",
];

const DRUGS: &[&str] = &[
    "lisinopril",
    "metformin",
    "atorvastatin",
    "amoxicillin",
    "omeprazole",
    "sertraline",
    "ibuprofen",
    "levothyroxine",
];

const CONDITIONS: &[&str] = &[
    "hypertension",
    "type two diabetes",
    "seasonal asthma",
    "chronic migraine",
    "iron deficiency",
    "acid reflux",
    "mild arthritis",
    "an ear infection",
];

const MARKERS: &[&str] =
    &["glucose", "cholesterol", "creatinine", "ferritin", "white cell count", "bilirubin"];

const FN_NAMES: &[&str] = &[
    "parse_header",
    "merge_sorted",
    "find_duplicates",
    "compute_checksum",
    "split_lines",
    "normalize_path",
    "count_tokens",
    "rotate_buffer",
];

const TYPES: &[&str] = &["integers", "strings", "bytes", "floats", "records", "timestamps"];

const STRUCTURES: &[&str] =
    &["list", "queue", "hash map", "binary tree", "ring buffer", "stack", "csv file"];

const EDGES: &[&str] = &[
    "empty input",
    "a single element",
    "duplicate keys",
    "trailing whitespace",
    "unicode boundaries",
    "integer overflow",
    "a missing delimiter",
];

const AGGS: &[&str] = &["sum", "maximum", "median", "running average", "product", "minimum"];

fn pick<'a>(rng: &mut ChaCha8Rng, bank: &[&'a str]) -> &'a str {
    bank[rng.gen_range(0..bank.len())]
}

fn medical_sentence(rng: &mut ChaCha8Rng) -> String {
    match rng.gen_range(0..6) {
        0 => format!(
            "Patient reports {} for {} and requests advice on treatment.",
            pick(rng, SYMPTOMS),
            pick(rng, DURATIONS)
        ),
        1 => format!(
            "The patient presents with {} together with {}.",
            pick(rng, SYMPTOMS),
            pick(rng, SYMPTOMS)
        ),
        2 => format!(
            "Prescribed {} mg of {} twice daily for {}.",
            [5, 10, 20, 40, 50, 100, 250, 500][rng.gen_range(0..8)],
            pick(rng, DRUGS),
            pick(rng, CONDITIONS)
        ),
        3 => format!(
            "Follow up in {} to reassess {} after starting {}.",
            pick(rng, DURATIONS),
            pick(rng, CONDITIONS),
            pick(rng, DRUGS)
        ),
        4 => format!(
            "Lab results show elevated {} consistent with {}.",
            pick(rng, MARKERS),
            pick(rng, CONDITIONS)
        ),
        _ => format!(
            "History of {} managed with {} with no reported side effects for {}.",
            pick(rng, CONDITIONS),
            pick(rng, DRUGS),
            pick(rng, DURATIONS)
        ),
    }
}

fn code_sentence(rng: &mut ChaCha8Rng) -> String {
    match rng.gen_range(0..6) {
        0 => format!(
            "Write a function that sorts a {} of {} in descending order.",
            pick(rng, STRUCTURES),
            pick(rng, TYPES)
        ),
        1 => format!(
            "The method {} returns zero when the input {} is empty.",
            pick(rng, FN_NAMES),
            pick(rng, STRUCTURES)
        ),
        2 => format!(
            "Refactor {} to handle {} without panicking.",
            pick(rng, FN_NAMES),
            pick(rng, EDGES)
        ),
        3 => format!(
            "Add a unit test for {} covering the {} case.",
            pick(rng, FN_NAMES),
            pick(rng, EDGES)
        ),
        4 => format!(
            "Implement {} so it computes the {} of a {} of {}.",
            pick(rng, FN_NAMES),
            pick(rng, AGGS),
            pick(rng, STRUCTURES),
            pick(rng, TYPES)
        ),
        _ => format!(
            "Cache the {} inside {} to avoid recomputing it for every {}.",
            pick(rng, AGGS),
            pick(rng, FN_NAMES),
            pick(rng, STRUCTURES)
        ),
    }
}

/// Generate `count` sentences of one style. Same (style, count, seed) always
/// yields the same texts.
pub fn synth_corpus(style: Style, count: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ style_salt(style));
    (0..count)
        .map(|_| match style {
            Style::Medical => medical_sentence(&mut rng),
            Style::Code => code_sentence(&mut rng),
        })
        .collect()
}

/// Alternating mix of both styles, useful as a general training corpus.
pub fn synth_mixed(count: usize, seed: u64) -> Vec<String> {
    let med = synth_corpus(Style::Medical, count / 2 + count % 2, seed);
    let code = synth_corpus(Style::Code, count / 2, seed);
    let mut out = Vec::with_capacity(count);
    let mut mi = med.into_iter();
    let mut ci = code.into_iter();
    for i in 0..count {
        let next = if i % 2 == 0 { mi.next() } else { ci.next() };
        out.push(next.expect("split sizes cover count"));
    }
    out
}

fn style_salt(style: Style) -> u64 {
    match style {
        Style::Medical => 0x4d45_4431,
        Style::Code => 0x434f_4445,
    }
}

// ── JSONL ───────────────────────────────────────────────────────────────────

#[derive(serde::Serialize, serde::Deserialize)]
struct CorpusLine {
    text: String,
}

/// Read a JSONL corpus (`{"text": ...}` per line). Malformed non-empty lines
/// are skipped; the count of skipped lines is returned alongside the texts.
pub fn ingest_corpus(path: &Path) -> Result<(Vec<String>, usize)> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Corpus(format!("open {}: {}", path.display(), e)))?;
    let mut texts = Vec::new();
    let mut skipped = 0usize;
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CorpusLine>(&line) {
            Ok(row) => texts.push(row.text),
            Err(_) => skipped += 1,
        }
    }
    Ok((texts, skipped))
}

/// Write texts as a JSONL corpus.
pub fn write_corpus(path: &Path, texts: &[String]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for text in texts {
        serde_json::to_writer(&mut out, &CorpusLine { text: text.clone() })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = synth_corpus(Style::Medical, 20, 42);
        let b = synth_corpus(Style::Medical, 20, 42);
        assert_eq!(a, b);
        let c = synth_corpus(Style::Medical, 20, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn styles_do_not_collide() {
        let med = synth_corpus(Style::Medical, 50, 7);
        let code = synth_corpus(Style::Code, 50, 7);
        assert!(med.iter().all(|t| !code.contains(t)));
    }

    #[test]
    fn mixed_interleaves_both_styles() {
        let mix = synth_mixed(11, 3);
        assert_eq!(mix.len(), 11);
        let med = synth_corpus(Style::Medical, 6, 3);
        assert_eq!(mix[0], med[0]);
    }

    #[test]
    fn jsonl_round_trip_and_malformed_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let texts = synth_corpus(Style::Code, 5, 1);
        write_corpus(&path, &texts).unwrap();

        // append junk lines
        let mut raw = std::fs::read_to_string(&path).unwrap();
        raw.push_str("not json at all\n{\"wrong\": 1}\n\n");
        std::fs::write(&path, raw).unwrap();

        let (back, skipped) = ingest_corpus(&path).unwrap();
        assert_eq!(back, texts);
        assert_eq!(skipped, 2);
    }

    #[test]
    fn round_trip_preserves_tricky_content() {
        let texts: Vec<String> = vec![
            "with \"quotes\" and, commas".into(),
            "embedded\nnewline\tand tab".into(),
            "unicode: μg/dL 37.5°".into(),
            String::new(),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tricky.jsonl");
        write_corpus(&path, &texts).unwrap();
        let (back, skipped) = ingest_corpus(&path).unwrap();
        assert_eq!(back, texts);
        assert_eq!(skipped, 0);
    }
}
