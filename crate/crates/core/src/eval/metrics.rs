//! Ranking and text-generation metrics.

use std::collections::HashMap;

use crate::kg::EntityId;
use crate::recommender::Recommendation;

use super::EvalError;

/// Lowercases and splits on whitespace after isolating punctuation characters.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() + 8);
    for c in text.chars() {
        if c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace()) {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        } else {
            spaced.extend(c.to_lowercase());
        }
    }
    spaced.split_whitespace().map(str::to_string).collect()
}

/// 1 iff `gold` is among the first `min(k, |ranked|)` entries.
pub fn recall_at_k(ranked: &Recommendation, gold: EntityId, k: usize) -> u32 {
    assert!(k >= 1, "recall@k needs k >= 1");
    u32::from(ranked.ranked.iter().take(k).any(|r| r.entity == gold))
}

/// Corpus-level recall over a fixed list of cutoffs. Merging is order-free.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecallAccumulator {
    ks: Vec<usize>,
    hits: Vec<u64>,
    turns: u64,
}

impl RecallAccumulator {
    pub fn new(ks: &[usize]) -> Result<Self, EvalError> {
        let mut ks = ks.to_vec();
        ks.sort_unstable();
        ks.dedup();
        if ks.is_empty() || ks[0] == 0 {
            return Err(EvalError::Config("recall cutoffs must be a non-empty list of positive integers".into()));
        }
        let hits = vec![0; ks.len()];
        Ok(Self { ks, hits, turns: 0 })
    }

    pub fn add(&mut self, ranked: &Recommendation, gold: EntityId) {
        for (k, h) in self.ks.iter().zip(&mut self.hits) {
            *h += u64::from(recall_at_k(ranked, gold, *k));
        }
        self.turns += 1;
    }

    pub fn merge(&mut self, other: &Self) {
        assert_eq!(self.ks, other.ks, "merging accumulators with different cutoffs");
        for (a, b) in self.hits.iter_mut().zip(&other.hits) {
            *a += b;
        }
        self.turns += other.turns;
    }

    pub fn ks(&self) -> &[usize] {
        &self.ks
    }

    pub fn turns(&self) -> u64 {
        self.turns
    }

    /// `(k, mean hit rate)` per cutoff; 0 over an empty corpus.
    pub fn values(&self) -> Vec<(usize, f64)> {
        self.ks
            .iter()
            .zip(&self.hits)
            .map(|(&k, &h)| (k, if self.turns == 0 { 0.0 } else { h as f64 / self.turns as f64 }))
            .collect()
    }
}

fn ngrams<T: AsRef<str>>(tokens: &[T], n: usize) -> impl Iterator<Item = Vec<&str>> + '_ {
    tokens.windows(n).map(|w| w.iter().map(AsRef::as_ref).collect())
}

/// Distinct n-grams over total n-grams, pooled across the corpus.
pub fn distinct_n<T: AsRef<str>>(utterances: &[Vec<T>], n: usize) -> f64 {
    assert!(n >= 1, "distinct-n needs n >= 1");
    let mut seen = std::collections::HashSet::new();
    let mut total = 0usize;
    for u in utterances {
        for g in ngrams(u, n) {
            total += 1;
            seen.insert(g);
        }
    }
    if total == 0 {
        0.0
    } else {
        seen.len() as f64 / total as f64
    }
}

pub const BLEU_ORDER: usize = 4;

/// Pooled clipped n-gram counts for corpus BLEU.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [u64; BLEU_ORDER],
    pub totals: [u64; BLEU_ORDER],
    pub candidate_len: u64,
    pub reference_len: u64,
}

impl BleuStats {
    pub fn add<T: AsRef<str>>(&mut self, candidate: &[T], reference: &[T]) {
        self.candidate_len += candidate.len() as u64;
        self.reference_len += reference.len() as u64;
        for n in 1..=BLEU_ORDER {
            let mut ref_counts: HashMap<Vec<&str>, u64> = HashMap::new();
            for g in ngrams(reference, n) {
                *ref_counts.entry(g).or_default() += 1;
            }
            let mut cand_counts: HashMap<Vec<&str>, u64> = HashMap::new();
            for g in ngrams(candidate, n) {
                *cand_counts.entry(g).or_default() += 1;
            }
            for (g, c) in cand_counts {
                self.matches[n - 1] += c.min(ref_counts.get(&g).copied().unwrap_or(0));
                self.totals[n - 1] += c;
            }
        }
    }

    pub fn merge(&mut self, other: &Self) {
        for n in 0..BLEU_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.candidate_len += other.candidate_len;
        self.reference_len += other.reference_len;
    }

    /// BLEU-4 with uniform weights and no smoothing. An order with no
    /// candidate n-grams at all counts as precision 1; any order with
    /// candidate n-grams but no matches makes the score 0.
    pub fn score(&self) -> f64 {
        if self.candidate_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..BLEU_ORDER {
            if self.totals[n] == 0 {
                continue;
            }
            if self.matches[n] == 0 {
                return 0.0;
            }
            log_sum += (self.matches[n] as f64 / self.totals[n] as f64).ln() / BLEU_ORDER as f64;
        }
        let (c, r) = (self.candidate_len as f64, self.reference_len as f64);
        let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
        bp * log_sum.exp()
    }
}

/// Corpus BLEU-4 with one reference per candidate.
pub fn bleu<T: AsRef<str>>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64, EvalError> {
    if candidates.len() != references.len() {
        return Err(EvalError::Contract(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(EvalError::Contract("bleu needs at least one candidate".into()));
    }
    let mut stats = BleuStats::default();
    for (c, r) in candidates.iter().zip(references) {
        stats.add(c, r);
    }
    Ok(stats.score())
}
