//! Byte-level tokenizer with learned byte-pair merges.
//!
//! Ids 0..=255 are raw bytes, so any byte string tokenizes and the round trip
//! is lossless by construction. Learned merges extend the vocabulary up to
//! 1024 entries.

use crate::{Error, Result};
use std::collections::HashMap;

pub const MIN_VOCAB: usize = 256;
pub const MAX_VOCAB: usize = 1024;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Tokenizer {
    /// Merge i combines the pair into token id 256 + i.
    merges: Vec<(u32, u32)>,
    /// Byte expansion of every token id.
    #[serde(skip)]
    token_bytes: Vec<Vec<u8>>,
    #[serde(skip)]
    rank: HashMap<(u32, u32), usize>,
}

impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.merges == other.merges
    }
}

impl Tokenizer {
    /// Pure byte tokenizer, vocab 256, no merges.
    pub fn bytes_only() -> Self {
        Self::assemble(Vec::new())
    }

    fn assemble(merges: Vec<(u32, u32)>) -> Self {
        let token_bytes = byte_table(&merges);
        let rank = merges.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        Tokenizer { merges, token_bytes, rank }
    }

    pub fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self> {
        if 256 + merges.len() > MAX_VOCAB {
            return Err(Error::Tokenizer(format!("{} merges exceed max vocab", merges.len())));
        }
        for (i, &(a, b)) in merges.iter().enumerate() {
            let limit = (256 + i) as u32;
            if a >= limit || b >= limit {
                return Err(Error::Tokenizer(format!("merge {} references unknown token", i)));
            }
        }
        Ok(Self::assemble(merges))
    }

    /// Learn merges from a corpus until `vocab_size` is reached or no pair
    /// occurs at least twice. Ties break toward the smallest pair so training
    /// is deterministic.
    pub fn train(texts: &[String], vocab_size: usize) -> Result<Self> {
        if !(MIN_VOCAB..=MAX_VOCAB).contains(&vocab_size) {
            return Err(Error::Tokenizer(format!(
                "vocab_size {} outside {}..={}",
                vocab_size, MIN_VOCAB, MAX_VOCAB
            )));
        }
        let mut seqs: Vec<Vec<u32>> =
            texts.iter().map(|t| t.as_bytes().iter().map(|&b| b as u32).collect()).collect();
        let mut merges = Vec::with_capacity(vocab_size - 256);
        while 256 + merges.len() < vocab_size {
            let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
            for seq in &seqs {
                for win in seq.windows(2) {
                    *counts.entry((win[0], win[1])).or_insert(0) += 1;
                }
            }
            let best = counts
                .iter()
                .filter(|(_, &c)| c >= 2)
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then(pb.cmp(pa)))
                .map(|(&p, _)| p);
            let pair = match best {
                Some(p) => p,
                None => break,
            };
            let new_id = (256 + merges.len()) as u32;
            for seq in seqs.iter_mut() {
                merge_in_place(seq, pair, new_id);
            }
            merges.push(pair);
        }
        Ok(Self::assemble(merges))
    }

    pub fn vocab_size(&self) -> usize {
        256 + self.merges.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Rebuild the derived tables; needed after serde deserialization.
    pub fn rebuild(&mut self) {
        if self.token_bytes.is_empty() {
            self.token_bytes = byte_table(&self.merges);
            self.rank = self.merges.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        }
    }

    /// Total over arbitrary byte strings: worst case it falls back to raw
    /// bytes. Merges apply in learned rank order.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        self.tokenize_bytes(text.as_bytes())
    }

    pub fn tokenize_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        let mut seq: Vec<u32> = bytes.iter().map(|&b| b as u32).collect();
        if seq.len() < 2 {
            return seq;
        }
        // The lowest rank present never decreases across iterations (new
        // adjacencies always involve a freshly minted id, which only appears
        // in later merges), so this loop runs at most `merges` times.
        loop {
            let mut best: Option<(usize, (u32, u32))> = None;
            for win in seq.windows(2) {
                let pair = (win[0], win[1]);
                if let Some(&rank) = self.rank.get(&pair) {
                    if best.map_or(true, |(r, _)| rank < r) {
                        best = Some((rank, pair));
                    }
                }
            }
            match best {
                Some((rank, pair)) => merge_in_place(&mut seq, pair, (256 + rank) as u32),
                None => return seq,
            }
        }
    }

    /// Inverse of tokenize; errors on ids outside the vocabulary.
    pub fn detokenize(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let bytes = self
                .token_bytes
                .get(id as usize)
                .ok_or_else(|| Error::Tokenizer(format!("id {} outside vocab {}", id, self.vocab_size())))?;
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    /// Detokenize to text, replacing invalid utf-8 (possible for adversarially
    /// chosen ids) with the replacement character.
    pub fn detokenize_lossy(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.detokenize(ids)?).into_owned())
    }
}

fn byte_table(merges: &[(u32, u32)]) -> Vec<Vec<u8>> {
    let mut table: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    for &(a, b) in merges {
        let mut joined = table[a as usize].clone();
        joined.extend_from_slice(&table[b as usize]);
        table.push(joined);
    }
    table
}

fn merge_in_place(seq: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut write = 0;
    let mut read = 0;
    while read < seq.len() {
        if read + 1 < seq.len() && seq[read] == pair.0 && seq[read + 1] == pair.1 {
            seq[write] = new_id;
            read += 2;
        } else {
            seq[write] = seq[read];
            read += 1;
        }
        write += 1;
    }
    seq.truncate(write);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_mixed, Style};
    use proptest::prelude::*;

    fn trained() -> &'static Tokenizer {
        static TOK: std::sync::OnceLock<Tokenizer> = std::sync::OnceLock::new();
        TOK.get_or_init(|| Tokenizer::train(&synth_mixed(200, 11), 384).unwrap())
    }

    #[test]
    fn vocab_bounds_enforced() {
        assert!(Tokenizer::train(&[], 255).is_err());
        assert!(Tokenizer::train(&[], 1025).is_err());
        assert!(Tokenizer::train(&[], 256).is_ok());
    }

    #[test]
    fn round_trip_exact_on_corpus() {
        let tok = trained();
        for text in synth_mixed(50, 99) {
            let ids = tok.tokenize(&text);
            assert_eq!(tok.detokenize(&ids).unwrap(), text.as_bytes());
        }
    }

    #[test]
    fn merges_compress_trained_text() {
        let tok = trained();
        let text = &synth_corpus_sample();
        let ids = tok.tokenize(text);
        assert!(ids.len() < text.len(), "{} tokens for {} bytes", ids.len(), text.len());
        assert!(ids.iter().any(|&id| id >= 256), "no merged token used");
    }

    fn synth_corpus_sample() -> String {
        crate::corpus::synth_corpus(Style::Medical, 1, 11).remove(0)
    }

    #[test]
    fn training_is_deterministic() {
        let texts = synth_mixed(120, 5);
        let a = Tokenizer::train(&texts, 300).unwrap();
        let b = Tokenizer::train(&texts, 300).unwrap();
        assert_eq!(a.merges(), b.merges());
    }

    #[test]
    fn detokenize_rejects_out_of_range() {
        let tok = trained();
        let bad = tok.vocab_size() as u32;
        assert!(tok.detokenize(&[0, bad]).is_err());
    }

    #[test]
    fn empty_text_yields_empty_ids() {
        let tok = trained();
        assert!(tok.tokenize("").is_empty());
        assert!(tok.detokenize(&[]).unwrap().is_empty());
    }

    #[test]
    fn serde_round_trip_preserves_behavior() {
        let tok = trained();
        let json = serde_json::to_string(&tok).unwrap();
        let mut back: Tokenizer = serde_json::from_str(&json).unwrap();
        back.rebuild();
        let text = "Patient reports a dry cough for two weeks.";
        assert_eq!(tok.tokenize(text), back.tokenize(text));
        assert_eq!(back.detokenize(&back.tokenize(text)).unwrap(), text.as_bytes());
    }

    proptest! {
        #[test]
        fn round_trip_any_string(s in "\\PC*") {
            let tok = trained();
            let ids = tok.tokenize(&s);
            prop_assert_eq!(tok.detokenize(&ids).unwrap(), s.as_bytes());
        }

        #[test]
        fn round_trip_any_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let tok = Tokenizer::bytes_only();
            let ids = tok.tokenize_bytes(&bytes);
            prop_assert_eq!(tok.detokenize(&ids).unwrap(), bytes);
        }
    }
}
