//! Toy vocabulary, encoding, greedy packing and dynamic masking.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng::row_rng;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;

/// Reserved tokens, in id order.
pub const RESERVED: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

/// Default masking rate.
pub const MASK_RATE: f64 = 0.15;

pub fn is_special(id: u32) -> bool {
    matches!(id, PAD | CLS | SEP)
}

/// Dense bidirectional mapping between token strings and ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from the most frequent whitespace-delimited units.
    /// Ties are broken lexicographically so the result depends only on the
    /// corpus contents.
    pub fn build<'s>(lines: impl IntoIterator<Item = &'s str>, target_size: usize) -> Result<Self> {
        if target_size <= RESERVED.len() {
            return Err(Error::contract(format!(
                "vocabulary size {target_size} leaves no room beyond the {} reserved tokens",
                RESERVED.len()
            )));
        }
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for line in lines {
            for unit in line.split_whitespace() {
                *counts.entry(unit).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|(unit, _)| !RESERVED.contains(unit))
            .collect();
        // BTreeMap iteration is already lexicographic; a stable sort on count keeps that order for ties.
        ranked.sort_by(|a, b| b.1.cmp(&a.1));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(
                ranked
                    .into_iter()
                    .take(target_size - RESERVED.len())
                    .map(|(u, _)| u.to_string()),
            )
            .collect();
        Self::from_tokens(tokens)
    }

    /// Wraps an explicit token list; position is id.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::contract(format!("vocabulary id {i} must be {r}")));
            }
        }
        let mut ids = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::contract(format!("invalid token {t:?} at id {i}")));
            }
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::contract(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    /// Parses the one-token-per-line file format.
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(|l| l.to_string()).collect())
    }

    /// Renders the one-token-per-line file format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// `CLS tokens… SEP`, never containing PAD.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.len() < 2 || ids[0] != CLS || ids[ids.len() - 1] != SEP {
            return Err(Error::contract("token sequence must start with CLS and end with SEP"));
        }
        if ids.contains(&PAD) {
            return Err(Error::contract("token sequence contains PAD"));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_maskable(&self) -> usize {
        self.ids.iter().filter(|&&id| !is_special(id)).count()
    }
}

pub fn encode(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    if max_len < 3 {
        return Err(Error::contract(format!("max_len {max_len} < 3")));
    }
    let mut ids = Vec::with_capacity(max_len.min(64));
    ids.push(CLS);
    ids.extend(
        text.split_whitespace()
            .take(max_len - 2)
            .map(|u| vocab.id(u).unwrap_or(UNK)),
    );
    ids.push(SEP);
    Ok(TokenSequence { ids })
}

/// Number of positions to mask in a row with `n_maskable` candidates.
pub fn mask_count(n_maskable: usize, rate: f64) -> usize {
    (libm::round(rate * n_maskable as f64) as usize).max(1)
}

/// One masked micro-batch, `batch × seq_len`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub input_ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    /// Per row, ascending positions replaced by MASK.
    pub masked_positions: Vec<Vec<usize>>,
    /// Per row, the original ids at `masked_positions`.
    pub original_ids: Vec<Vec<u32>>,
    pub rng_seed: u64,
    /// Global index of this batch's first row; keys the per-row random streams.
    pub first_row: usize,
}

impl MaskedBatch {
    /// The unmasked input, restored from the stored originals.
    pub fn original_input(&self) -> Vec<u32> {
        let mut ids = self.input_ids.clone();
        for (r, (pos, orig)) in self.masked_positions.iter().zip(&self.original_ids).enumerate() {
            for (&p, &o) in pos.iter().zip(orig) {
                ids[r * self.seq_len + p] = o;
            }
        }
        ids
    }

    pub fn n_masked(&self) -> usize {
        self.masked_positions.iter().map(Vec::len).sum()
    }

    pub fn n_tokens(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// `(flat row index, original id)` for every masked position.
    pub fn mlm_targets(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.n_masked());
        for (r, (pos, orig)) in self.masked_positions.iter().zip(&self.original_ids).enumerate() {
            for (&p, &o) in pos.iter().zip(orig) {
                out.push((r * self.seq_len + p, o as usize));
            }
        }
        out
    }

    pub fn valid_row(&self, r: usize) -> Vec<bool> {
        self.attention_mask[r * self.seq_len..(r + 1) * self.seq_len]
            .iter()
            .map(|&m| m == 1)
            .collect()
    }
}

/// Dynamic masking: each row gets `max(1, round(rate · n_maskable))`
/// distinct uniformly chosen non-special positions, all set to MASK.
pub fn make_masked_batch(
    rows: &[TokenSequence],
    seq_len: usize,
    rate: f64,
    rng_seed: u64,
) -> Result<MaskedBatch> {
    make_masked_batch_at(rows, seq_len, rate, rng_seed, 0)
}

/// As [`make_masked_batch`], for rows that start at global index `first_row`.
pub fn make_masked_batch_at(
    rows: &[TokenSequence],
    seq_len: usize,
    rate: f64,
    rng_seed: u64,
    first_row: usize,
) -> Result<MaskedBatch> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::contract(format!("mask rate {rate} outside [0, 1)")));
    }
    if rows.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let batch = rows.len();
    let mut input_ids = vec![PAD; batch * seq_len];
    let mut attention_mask = vec![0u8; batch * seq_len];
    let mut masked_positions = Vec::with_capacity(batch);
    let mut original_ids = Vec::with_capacity(batch);
    for (r, row) in rows.iter().enumerate() {
        if row.len() > seq_len {
            return Err(Error::contract(format!(
                "row of length {} exceeds sequence length {seq_len}",
                row.len()
            )));
        }
        let maskable: Vec<usize> = row
            .ids()
            .iter()
            .enumerate()
            .filter(|(_, &id)| !is_special(id))
            .map(|(i, _)| i)
            .collect();
        let count = mask_count(maskable.len(), rate);
        if count > maskable.len() {
            return Err(Error::contract(format!(
                "row {r} needs {count} masked positions but has {} maskable tokens",
                maskable.len()
            )));
        }
        let mut rng = row_rng(rng_seed, first_row + r);
        let mut chosen: Vec<usize> = index::sample(&mut rng, maskable.len(), count)
            .into_iter()
            .map(|k| maskable[k])
            .collect();
        chosen.sort_unstable();

        let dst = &mut input_ids[r * seq_len..r * seq_len + row.len()];
        dst.copy_from_slice(row.ids());
        attention_mask[r * seq_len..r * seq_len + row.len()].fill(1);
        let originals = chosen.iter().map(|&p| row.ids()[p]).collect();
        for &p in &chosen {
            dst[p] = MASK;
        }
        masked_positions.push(chosen);
        original_ids.push(originals);
    }
    Ok(MaskedBatch {
        batch,
        seq_len,
        input_ids,
        attention_mask,
        masked_positions,
        original_ids,
        rng_seed,
        first_row,
    })
}

/// Endless greedy packer over an encoded corpus: consecutive sequences are
/// concatenated while they fit in `max_len`; the corpus wraps around.
#[derive(Debug, Clone)]
pub struct PhasePacker {
    sequences: Vec<TokenSequence>,
    max_len: usize,
    cursor: usize,
    rows_emitted: u64,
}

impl PhasePacker {
    /// Sequences without a maskable token are dropped; longer ones are
    /// truncated to `max_len`.
    pub fn new(sequences: Vec<TokenSequence>, max_len: usize) -> Result<Self> {
        if max_len < 3 {
            return Err(Error::contract(format!("max_len {max_len} < 3")));
        }
        let sequences: Vec<TokenSequence> = sequences
            .into_iter()
            .filter(|s| s.n_maskable() > 0)
            .map(|s| {
                if s.len() <= max_len {
                    s
                } else {
                    let mut ids = s.ids[..max_len - 1].to_vec();
                    ids.push(SEP);
                    TokenSequence { ids }
                }
            })
            .collect();
        if sequences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self {
            sequences,
            max_len,
            cursor: 0,
            rows_emitted: 0,
        })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn rows_emitted(&self) -> u64 {
        self.rows_emitted
    }

    pub fn next_row(&mut self) -> TokenSequence {
        let mut ids = Vec::with_capacity(self.max_len);
        loop {
            let next = &self.sequences[self.cursor];
            if !ids.is_empty() && ids.len() + next.len() > self.max_len {
                break;
            }
            ids.extend_from_slice(next.ids());
            self.cursor = (self.cursor + 1) % self.sequences.len();
            if ids.len() == self.max_len {
                break;
            }
        }
        self.rows_emitted += 1;
        TokenSequence { ids }
    }

    pub fn skip_rows(&mut self, n: u64) {
        for _ in 0..n {
            self.next_row();
        }
    }

    /// Next `batch` rows, padded to `max_len` and masked. Row `r` of the
    /// result uses the random stream of global row `first_row + r`.
    pub fn next_batch(
        &mut self,
        batch: usize,
        rate: f64,
        rng_seed: u64,
        first_row: usize,
    ) -> Result<MaskedBatch> {
        let rows: Vec<TokenSequence> = (0..batch).map(|_| self.next_row()).collect();
        make_masked_batch_at(&rows, self.max_len, rate, rng_seed, first_row)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn seq(n: usize) -> TokenSequence {
        let mut ids = vec![CLS];
        ids.extend((0..n).map(|i| 5 + (i % 50) as u32));
        ids.push(SEP);
        TokenSequence::new(ids).unwrap()
    }

    #[test]
    fn vocab_frequency_order() {
        let v = Vocabulary::build(["a a b"], 7).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.id("b"), Some(6));
    }

    #[test]
    fn vocab_tie_is_lexicographic() {
        let v = Vocabulary::build(["y x"], 6).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("x"), Some(5));
        assert_eq!(v.id("y"), None);
    }

    #[test]
    fn vocab_errors() {
        assert_eq!(Vocabulary::build(["", "  "], 10), Err(Error::EmptyCorpus));
        assert!(Vocabulary::build(["a"], 5).is_err());
        assert!(Vocabulary::parse("[PAD]\n[CLS]\n").is_err());
        assert!(Vocabulary::parse("[PAD]\n[CLS]\n[SEP]\n[MASK]\n[UNK]\na\na\n").is_err());
    }

    #[test]
    fn vocab_roundtrip_ids() {
        let v = Vocabulary::build(["the cat sat on the mat the end"], 100).unwrap();
        for i in 0..v.len() as u32 {
            assert_eq!(v.id(v.token(i).unwrap()), Some(i));
        }
        assert_eq!(Vocabulary::parse(&v.to_text()).unwrap(), v);
    }

    #[test]
    fn vocab_matches_recount_oracle() {
        // 1000 synthetic lines with a skewed unit distribution.
        let lines: Vec<String> = (0..1000)
            .map(|i| {
                (0..(i % 7 + 1))
                    .map(|j| format!("w{}", (i * 31 + j * 17) % ((j + 1) * 13)))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let v = Vocabulary::build(lines.iter().map(String::as_str), 40).unwrap();

        let mut counts: HashMap<String, u64> = HashMap::new();
        for l in &lines {
            for u in l.split(' ') {
                *counts.entry(u.to_string()).or_default() += 1;
            }
        }
        let mut expect: Vec<(String, u64)> = counts.into_iter().collect();
        expect.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (k, (tok, _)) in expect.iter().take(35).enumerate() {
            assert_eq!(v.id(tok), Some(5 + k as u32), "{tok}");
        }
        assert_eq!(v.len(), 40);
    }

    #[test]
    fn encode_cases() {
        let v = Vocabulary::build(["a b"], 10).unwrap();
        assert_eq!(encode("", &v, 8).unwrap().ids(), &[CLS, SEP]);
        let ab = encode("a b", &v, 8).unwrap();
        assert_eq!(ab.ids(), &[CLS, v.id("a").unwrap(), v.id("b").unwrap(), SEP]);
        assert_eq!(encode("a zzz", &v, 8).unwrap().ids()[2], UNK);
        let long: String = (0..600).map(|_| "a ").collect();
        assert_eq!(encode(&long, &v, 512).unwrap().len(), 512);
        assert!(encode("a", &v, 2).is_err());
    }

    #[test]
    fn mask_count_rule() {
        assert_eq!(mask_count(126, 0.15), 19);
        assert_eq!(mask_count(10, 0.0), 1);
        assert_eq!(mask_count(3, 0.15), 1);
    }

    #[test]
    fn zero_rate_masks_one() {
        let b = make_masked_batch(&[seq(10)], 12, 0.0, 3).unwrap();
        assert_eq!(b.masked_positions[0].len(), 1);
    }

    #[test]
    fn masking_126_maskable() {
        let b = make_masked_batch(&[seq(126)], 128, 0.15, 9).unwrap();
        assert_eq!(b.masked_positions[0].len(), 19);
        for &p in &b.masked_positions[0] {
            assert_eq!(b.input_ids[p], MASK);
            assert!(p > 0 && p < 127);
        }
    }

    #[test]
    fn masking_is_seeded() {
        let rows = [seq(40), seq(20)];
        let a = make_masked_batch(&rows, 64, 0.15, 1).unwrap();
        let b = make_masked_batch(&rows, 64, 0.15, 1).unwrap();
        let c = make_masked_batch(&rows, 64, 0.15, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.masked_positions, c.masked_positions);
    }

    #[test]
    fn masking_rejects_bad_rate() {
        assert!(make_masked_batch(&[seq(4)], 8, 1.0, 0).is_err());
        assert!(make_masked_batch(&[seq(4)], 8, -0.1, 0).is_err());
    }

    #[test]
    fn greedy_packing() {
        let mut p = PhasePacker::new(vec![seq(58), seq(58), seq(100)], 128).unwrap();
        let r = p.next_row();
        assert_eq!(r.len(), 120);
        let r = p.next_row();
        assert_eq!(r.len(), 102);
        // wraps around
        let r = p.next_row();
        assert_eq!(r.len(), 120);
        assert_eq!(p.rows_emitted(), 3);
    }

    #[test]
    fn packed_batch_padding_never_masked() {
        let mut p = PhasePacker::new(vec![seq(30), seq(100)], 128).unwrap();
        let b = p.next_batch(4, 0.15, 5, 0).unwrap();
        assert_eq!(b.input_ids.len(), 4 * 128);
        for r in 0..4 {
            for &pos in &b.masked_positions[r] {
                assert_eq!(b.attention_mask[r * 128 + pos], 1);
            }
            for c in 0..128 {
                if b.attention_mask[r * 128 + c] == 0 {
                    assert_eq!(b.input_ids[r * 128 + c], PAD);
                }
            }
        }
    }

    #[test]
    fn packer_drops_empty_docs() {
        assert_eq!(
            PhasePacker::new(vec![TokenSequence::new(vec![CLS, SEP]).unwrap()], 16).unwrap_err(),
            Error::EmptyCorpus
        );
    }
}
