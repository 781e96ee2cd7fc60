//! Scoring of reconstructed text against the original: exact match, multiset
//! token F1, sentence BLEU-4, ROUGE-L, and a character-trigram cosine proxy
//! for semantic similarity.
//!
//! Every text-level metric strips trailing whitespace from both sides before
//! tokenizing, so an exact match scores 1 on all five metrics. The cosine
//! proxy stands in for an external sentence-embedding model to keep scoring
//! hermetic and deterministic; its absolute values are only meaningful for
//! comparing runs of this laboratory against each other, not against scores
//! produced with a real embedding model.

use crate::lm::Tokenizer;
use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsConfig {
    /// Semantic-similarity threshold for the success flag.
    pub tau_s: f64,
    /// Token-recall threshold for the success flag.
    pub tau_tm: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { tau_s: 0.8, tau_tm: 0.5 }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> crate::Result<()> {
        for (name, v) in [("tau_s", self.tau_s), ("tau_tm", self.tau_tm)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(crate::Error::Config(format!("{} {} outside [0,1]", name, v)));
            }
        }
        Ok(())
    }
}

/// All scores for one (candidate, reference) pair. Scores live on [0,1];
/// reports multiply by 100 for display.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScoreRow {
    pub cs: f64,
    pub bleu: f64,
    pub rouge: f64,
    pub em: f64,
    pub f1: f64,
    /// Candidate counts as a successful inversion: semantic proxy at or above
    /// tau_s and token recall at or above tau_tm.
    pub success: bool,
}

/// 1 iff the texts are byte-identical after trailing-whitespace strip.
/// Symmetric.
pub fn exact_match(a: &str, b: &str) -> f64 {
    (a.trim_end() == b.trim_end()) as u32 as f64
}

/// Multiset token F1 between the two texts under the given tokenizer.
/// Symmetric (P and R swap roles). Both empty → 1; exactly one empty → 0.
pub fn token_f1(a: &str, b: &str, tok: &Tokenizer) -> f64 {
    token_f1_ids(&tok.tokenize(a.trim_end()), &tok.tokenize(b.trim_end()))
}

pub fn token_f1_ids(a: &[u32], b: &[u32]) -> f64 {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let overlap = clipped_overlap(a, b);
    let p = overlap as f64 / a.len() as f64;
    let r = overlap as f64 / b.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Multiset token recall of the reference: |cand ∩ ref| / |ref|. Asymmetric;
/// this is the quantity the success flag thresholds.
pub fn token_recall(candidate: &str, reference: &str, tok: &Tokenizer) -> f64 {
    let c = tok.tokenize(candidate.trim_end());
    let r = tok.tokenize(reference.trim_end());
    match (c.is_empty(), r.is_empty()) {
        (_, true) => return if c.is_empty() { 1.0 } else { 0.0 },
        (true, false) => return 0.0,
        _ => {}
    }
    clipped_overlap(&c, &r) as f64 / r.len() as f64
}

fn clipped_overlap(a: &[u32], b: &[u32]) -> usize {
    let mut counts: HashMap<u32, isize> = HashMap::new();
    for &t in b {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0;
    for &t in a {
        if let Some(c) = counts.get_mut(&t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    overlap
}

const BLEU_EPS: f64 = 1e-9;

/// Sentence BLEU-4 of the candidate against the reference: uniform n-gram
/// weights, add-epsilon smoothing, multiplicative brevity penalty.
/// Asymmetric. Both empty → 1; empty candidate against text → 0.
pub fn bleu(candidate: &str, reference: &str, tok: &Tokenizer) -> f64 {
    bleu_ids(&tok.tokenize(candidate.trim_end()), &tok.tokenize(reference.trim_end()))
}

pub fn bleu_ids(candidate: &[u32], reference: &[u32]) -> f64 {
    if candidate.is_empty() {
        return if reference.is_empty() { 1.0 } else { 0.0 };
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        let mut matched = 0usize;
        let mut total = 0usize;
        for (g, &c) in &cand {
            matched += c.min(refc.get(g).copied().unwrap_or(0));
            total += c;
        }
        log_sum += ((matched as f64 + BLEU_EPS) / (total as f64 + BLEU_EPS)).ln();
    }
    let bp = if candidate.len() >= reference.len() {
        1.0
    } else {
        (1.0 - reference.len() as f64 / candidate.len() as f64).exp()
    };
    bp * (log_sum / 4.0).exp()
}

fn ngram_counts(ids: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut out = HashMap::new();
    if ids.len() >= n {
        for w in ids.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// ROUGE-L F-measure: longest common subsequence over tokens, harmonic mean
/// of LCS precision and recall. Both empty → 1; exactly one empty → 0.
pub fn rouge_l(candidate: &str, reference: &str, tok: &Tokenizer) -> f64 {
    rouge_l_ids(&tok.tokenize(candidate.trim_end()), &tok.tokenize(reference.trim_end()))
}

pub fn rouge_l_ids(candidate: &[u32], reference: &[u32]) -> f64 {
    match (candidate.is_empty(), reference.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let l = lcs_len(candidate, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

fn lcs_len(a: &[u32], b: &[u32]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Cosine similarity of character-trigram frequency vectors, in [0,1].
/// Symmetric. Texts shorter than one trigram have an empty vector; two such
/// texts score 1 if byte-identical (after trailing strip) and 0 otherwise.
pub fn cos_sim_proxy(a: &str, b: &str) -> f64 {
    let a = a.trim_end();
    let b = b.trim_end();
    let va = trigram_counts(a);
    let vb = trigram_counts(b);
    if va.is_empty() || vb.is_empty() {
        return if va.is_empty() && vb.is_empty() {
            (a == b) as u32 as f64
        } else {
            0.0
        };
    }
    let mut dot = 0.0;
    for (g, &c) in &va {
        dot += c as f64 * vb.get(g).copied().unwrap_or(0) as f64;
    }
    let na: f64 = va.values().map(|&c| (c * c) as f64).sum::<f64>().sqrt();
    let nb: f64 = vb.values().map(|&c| (c * c) as f64).sum::<f64>().sqrt();
    // sqrt rounding can push identical texts an ulp past 1
    (dot / (na * nb)).min(1.0)
}

fn trigram_counts(s: &str) -> HashMap<[char; 3], usize> {
    let chars: Vec<char> = s.chars().collect();
    let mut out = HashMap::new();
    for w in chars.windows(3) {
        *out.entry([w[0], w[1], w[2]]).or_insert(0) += 1;
    }
    out
}

/// Score a reconstruction against its reference on every metric plus the
/// thresholded success flag.
pub fn score(candidate: &str, reference: &str, tok: &Tokenizer, cfg: &MetricsConfig) -> ScoreRow {
    let cs = cos_sim_proxy(candidate, reference);
    let recall = token_recall(candidate, reference, tok);
    ScoreRow {
        cs,
        bleu: bleu(candidate, reference, tok),
        rouge: rouge_l(candidate, reference, tok),
        em: exact_match(candidate, reference),
        f1: token_f1(candidate, reference, tok),
        success: cs >= cfg.tau_s && recall >= cfg.tau_tm,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tok() -> Tokenizer {
        Tokenizer::bytes_only()
    }

    #[test]
    fn exact_match_strips_trailing_whitespace_only() {
        assert_eq!(exact_match("x", "x"), 1.0);
        assert_eq!(exact_match("x", "x "), 1.0);
        assert_eq!(exact_match("x", "x\n\t "), 1.0);
        assert_eq!(exact_match("x", "y"), 0.0);
        assert_eq!(exact_match(" x", "x"), 0.0, "leading space must count");
    }

    #[test]
    fn token_f1_hand_cases() {
        assert_eq!(token_f1_ids(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(token_f1_ids(&[1, 2], &[3, 4]), 0.0);
        assert_eq!(token_f1_ids(&[1, 2, 3, 4], &[3, 4, 5, 6]), 0.5);
        assert_eq!(token_f1_ids(&[], &[]), 1.0);
        assert_eq!(token_f1_ids(&[], &[1]), 0.0);
        assert_eq!(token_f1_ids(&[1], &[]), 0.0);
        // multiset clipping: candidate repeats a token the reference has once
        let f1 = token_f1_ids(&[7, 7, 7], &[7]);
        assert!((f1 - 0.5).abs() < 1e-12, "{}", f1);
    }

    #[test]
    fn token_f1_invariant_under_common_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a: Vec<u32> = (0..10).map(|_| rng.gen_range(0..6)).collect();
            let b: Vec<u32> = (0..8).map(|_| rng.gen_range(0..6)).collect();
            // apply one id permutation to both sequences
            let perm: Vec<u32> = vec![5, 3, 0, 1, 4, 2];
            let pa: Vec<u32> = a.iter().map(|&t| perm[t as usize]).collect();
            let pb: Vec<u32> = b.iter().map(|&t| perm[t as usize]).collect();
            assert!((token_f1_ids(&a, &b) - token_f1_ids(&pa, &pb)).abs() < 1e-12);
        }
    }

    #[test]
    fn bleu_vendored_fixtures() {
        // values hand-derived from the definition (clipped n-gram precisions,
        // epsilon smoothing 1e-9, brevity penalty), then frozen
        let cases: [(&[u32], &[u32], f64); 5] = [
            (&[1, 2, 3, 4, 1, 5], &[1, 2, 6, 4, 1, 5], 0.002540663741143586),
            (&[1, 2], &[1, 2], 1.0),
            (&[1], &[1, 2], 0.36787944117144233),
            (&[1, 1, 1, 1], &[2, 2, 2, 2], 4.5180100156960865e-10),
            (&[1, 2, 3, 4, 5], &[1, 2, 3, 9, 5], 0.002857440430032168),
        ];
        for (cand, refr, want) in cases {
            let got = bleu_ids(cand, refr);
            assert!((got - want).abs() < 1e-9, "{:?} vs {:?}: {} != {}", cand, refr, got, want);
        }
        assert_eq!(bleu_ids(&[], &[]), 1.0);
        assert_eq!(bleu_ids(&[], &[1]), 0.0);
    }

    #[test]
    fn bleu_matches_independent_implementation_on_random_pairs() {
        // second implementation, written differently on purpose: string-keyed
        // counting and explicit per-order loops
        fn oracle(c: &[u32], r: &[u32]) -> f64 {
            if c.is_empty() {
                return if r.is_empty() { 1.0 } else { 0.0 };
            }
            let key = |w: &[u32]| w.iter().map(|t| format!("{},", t)).collect::<String>();
            let mut acc = 0.0;
            for n in 1..=4usize {
                let mut rc: HashMap<String, f64> = HashMap::new();
                if r.len() >= n {
                    for w in r.windows(n) {
                        *rc.entry(key(w)).or_insert(0.0) += 1.0;
                    }
                }
                let mut cc: HashMap<String, f64> = HashMap::new();
                if c.len() >= n {
                    for w in c.windows(n) {
                        *cc.entry(key(w)).or_insert(0.0) += 1.0;
                    }
                }
                let total: f64 = cc.values().sum();
                let mut m = 0.0;
                for (g, v) in &cc {
                    m += v.min(rc.get(g).copied().unwrap_or(0.0));
                }
                acc += ((m + 1e-9) / (total + 1e-9)).ln();
            }
            let bp =
                if c.len() >= r.len() { 1.0 } else { (1.0 - r.len() as f64 / c.len() as f64).exp() };
            bp * (acc / 4.0).exp()
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let lc = rng.gen_range(0..12);
            let lr = rng.gen_range(1..12);
            let c: Vec<u32> = (0..lc).map(|_| rng.gen_range(0..5)).collect();
            let r: Vec<u32> = (0..lr).map(|_| rng.gen_range(0..5)).collect();
            let got = bleu_ids(&c, &r);
            let want = oracle(&c, &r);
            assert!((got - want).abs() < 1e-6, "{:?} vs {:?}: {} != {}", c, r, got, want);
        }
    }

    #[test]
    fn rouge_hand_cases() {
        // "a b c d" vs "a c d": LCS 3 over lengths 4 and 3 → F = 6/7
        let got = rouge_l_ids(&[1, 2, 3, 4], &[1, 3, 4]);
        assert!((got - 6.0 / 7.0).abs() < 1e-12, "{}", got);
        assert_eq!(rouge_l_ids(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(rouge_l_ids(&[1, 2], &[3, 4]), 0.0);
        assert_eq!(rouge_l_ids(&[], &[]), 1.0);
        assert_eq!(rouge_l_ids(&[], &[1]), 0.0);
        // LCS respects order: reversed tokens share single-element LCS only
        let rev = rouge_l_ids(&[1, 2, 3], &[3, 2, 1]);
        assert!((rev - 1.0 / 3.0).abs() < 1e-12, "{}", rev);
    }

    #[test]
    fn cos_proxy_hand_cases() {
        assert_eq!(cos_sim_proxy("hello world", "hello world"), 1.0);
        assert_eq!(cos_sim_proxy("abcabc", "xyzxyz"), 0.0);
        assert_eq!(cos_sim_proxy("", ""), 1.0);
        assert_eq!(cos_sim_proxy("ab", "ab"), 1.0, "short but equal");
        assert_eq!(cos_sim_proxy("ab", "cd"), 0.0);
        assert_eq!(cos_sim_proxy("ab", "abc"), 0.0, "one side has no trigram");
        // duplication: "abca" = {abc, bca}; "abcaabca" = {abc:2, bca:2, caa, aab}
        // cos = (2+2) / (sqrt(2) * sqrt(10)) = 4/sqrt(20)
        let got = cos_sim_proxy("abca", "abcaabca");
        assert!((got - 4.0 / 20f64.sqrt()).abs() < 1e-12, "{}", got);
    }

    #[test]
    fn exact_match_implies_all_ones() {
        let t = tok();
        let cfg = MetricsConfig::default();
        for text in ["patient reports stat pain", "fn f(x: u8) -> u8 { x }", "k", ""] {
            let with_ws = format!("{} \t", text);
            let row = score(&with_ws, text, &t, &cfg);
            assert_eq!(row.em, 1.0, "{:?}", text);
            assert_eq!(row.f1, 1.0, "{:?}", text);
            assert_eq!(row.bleu, 1.0, "{:?}", text);
            assert_eq!(row.rouge, 1.0, "{:?}", text);
            assert_eq!(row.cs, 1.0, "{:?}", text);
            assert!(row.success);
        }
    }

    #[test]
    fn success_flag_thresholds_cs_and_recall() {
        let t = tok();
        let strict = MetricsConfig { tau_s: 0.99, tau_tm: 0.99 };
        let loose = MetricsConfig { tau_s: 0.1, tau_tm: 0.1 };
        let cand = "the dose was 40 mg";
        let refr = "the dose was 45 mg";
        assert!(!score(cand, refr, &t, &strict).success);
        assert!(score(cand, refr, &t, &loose).success);
    }

    #[test]
    fn symmetric_metrics_are_symmetric() {
        let t = tok();
        let (a, b) = ("alpha beta gamma", "alpha delta gamma");
        assert_eq!(exact_match(a, b), exact_match(b, a));
        assert_eq!(cos_sim_proxy(a, b), cos_sim_proxy(b, a));
        assert_eq!(token_f1(a, b, &t), token_f1(b, a, &t));
        // and BLEU is not: candidate/reference roles differ
        assert_ne!(bleu("alpha", a, &t), bleu(a, "alpha", &t));
    }

    #[test]
    fn config_rejects_out_of_range_thresholds() {
        assert!(MetricsConfig { tau_s: 1.5, tau_tm: 0.5 }.validate().is_err());
        assert!(MetricsConfig { tau_s: 0.5, tau_tm: -0.1 }.validate().is_err());
        assert!(MetricsConfig::default().validate().is_ok());
    }
}
