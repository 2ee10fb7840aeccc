//! BLEU and chrF, compatible with the `tok:13a|smooth:exp` family of scorers.
//!
//! BLEU is computed from additive [`NGramStats`]; corpus scores are the BLEU
//! of the summed statistics. Orders for which the hypothesis side has no
//! n-grams at all (every hypothesis shorter than the order) are dropped from
//! the geometric mean, so that an identical short hypothesis still scores 100.
//!
//! chrF uses character n-grams of orders 1..=6 with beta = 2. Precision and
//! recall are each averaged over the orders present on both sides before the
//! F-score is taken. Whitespace runs are collapsed to a single space and the
//! ends are trimmed; the space character itself takes part in n-grams.

use std::collections::HashMap;
use std::iter::Sum;
use std::ops::{Add, AddAssign};
use std::sync::LazyLock;

use rayon::prelude::*;
use regex::Regex;

use crate::corpus::{NBestCorpus, ReferenceSet};
use crate::error::Result;

pub const MAX_ORDER: usize = 4;
pub const CHRF_ORDER: usize = 6;
pub const CHRF_BETA: f64 = 2.0;

static TOKENIZER_RULES: LazyLock<[(Regex, &'static str); 4]> = LazyLock::new(|| {
    [
        // symbols and most punctuation
        (
            Regex::new(r"([\{-~\[-`\x20-&\(-\+:-@/])").unwrap(),
            " ${1} ",
        ),
        // period and comma unless preceded by a digit
        (Regex::new(r"([^0-9])([\.,])").unwrap(), "${1} ${2} "),
        // period and comma unless followed by a digit
        (Regex::new(r"([\.,])([^0-9])").unwrap(), " ${1} ${2}"),
        // dash preceded by a digit
        (Regex::new(r"([0-9])(-)").unwrap(), "${1} ${2} "),
    ]
});

/// Whitespace as understood by Python's `str.split()`, which additionally
/// treats the ASCII separators U+001C..U+001F as spaces.
fn is_py_space(c: char) -> bool {
    c.is_whitespace() || ('\u{1c}'..='\u{1f}').contains(&c)
}

/// mteval-v13a tokenization.
pub fn tokenize_13a(text: &str) -> Vec<String> {
    let mut line = text
        .replace("<skipped>", "")
        .replace("-\n", "")
        .replace('\n', " ");
    if line.contains('&') {
        line = line
            .replace("&quot;", "\"")
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">");
    }
    let mut line = format!(" {line} ");
    for (re, rep) in TOKENIZER_RULES.iter() {
        if let std::borrow::Cow::Owned(s) = re.replace_all(&line, *rep) {
            line = s;
        }
    }
    line.split(is_py_space)
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Sufficient statistics for BLEU.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct NGramStats {
    pub clipped_matches: [u64; MAX_ORDER],
    pub hyp_ngrams: [u64; MAX_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl AddAssign for NGramStats {
    fn add_assign(&mut self, rhs: Self) {
        for o in 0..MAX_ORDER {
            self.clipped_matches[o] += rhs.clipped_matches[o];
            self.hyp_ngrams[o] += rhs.hyp_ngrams[o];
        }
        self.hyp_len += rhs.hyp_len;
        self.ref_len += rhs.ref_len;
    }
}

impl Add for NGramStats {
    type Output = Self;

    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl Sum for NGramStats {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

impl<'a> Sum<&'a NGramStats> for NGramStats {
    fn sum<I: Iterator<Item = &'a Self>>(iter: I) -> Self {
        iter.copied().sum()
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], order: usize) -> HashMap<Vec<&str>, u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= order {
        for w in tokens.windows(order) {
            *counts
                .entry(w.iter().map(AsRef::as_ref).collect())
                .or_insert(0) += 1;
        }
    }
    counts
}

/// Pre-counted references for one sentence: per n-gram, the maximum count
/// over all references, plus every reference length.
#[derive(Debug, Clone)]
pub struct ReferenceCounts {
    max_counts: Vec<HashMap<Vec<String>, u64>>,
    lengths: Vec<u64>,
}

impl ReferenceCounts {
    pub fn new<S: AsRef<str>>(refs: &[Vec<S>]) -> Self {
        let mut max_counts: Vec<HashMap<Vec<String>, u64>> = vec![HashMap::new(); MAX_ORDER];
        for r in refs {
            for (o, slot) in max_counts.iter_mut().enumerate() {
                for (gram, c) in ngram_counts(r, o + 1) {
                    let e = slot
                        .entry(gram.into_iter().map(str::to_string).collect())
                        .or_insert(0);
                    *e = (*e).max(c);
                }
            }
        }
        Self {
            max_counts,
            lengths: refs.iter().map(|r| r.len() as u64).collect(),
        }
    }

    /// Tokenizes raw reference strings with 13a.
    pub fn from_raw<S: AsRef<str>>(refs: &[S]) -> Self {
        let toks: Vec<Vec<String>> = refs.iter().map(|r| tokenize_13a(r.as_ref())).collect();
        Self::new(&toks)
    }

    /// Reference length closest to `hyp_len`; ties go to the shorter one.
    pub fn closest_len(&self, hyp_len: u64) -> u64 {
        self.lengths
            .iter()
            .copied()
            .min_by_key(|&l| (l.abs_diff(hyp_len), l))
            .unwrap_or(0)
    }

    pub fn stats<S: AsRef<str>>(&self, hyp: &[S]) -> NGramStats {
        let hyp_len = hyp.len() as u64;
        let mut stats = NGramStats {
            hyp_len,
            ref_len: self.closest_len(hyp_len),
            ..Default::default()
        };
        let mut key: Vec<String> = Vec::with_capacity(MAX_ORDER);
        for o in 0..MAX_ORDER {
            let order = o + 1;
            stats.hyp_ngrams[o] = (hyp.len() + 1).saturating_sub(order) as u64;
            for (gram, c) in ngram_counts(hyp, order) {
                key.clear();
                key.extend(gram.iter().map(|s| s.to_string()));
                if let Some(&r) = self.max_counts[o].get(&key) {
                    stats.clipped_matches[o] += c.min(r);
                }
            }
        }
        stats
    }
}

/// Statistics of one tokenized hypothesis against its tokenized references.
pub fn sentence_stats<S: AsRef<str>>(hyp: &[S], refs: &[Vec<S>]) -> NGramStats {
    ReferenceCounts::new(refs).stats(hyp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Smoothing {
    #[default]
    Exp,
    None,
}

impl Smoothing {
    pub fn name(self) -> &'static str {
        match self {
            Smoothing::Exp => "exp",
            Smoothing::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BleuScore {
    /// In [0, 100].
    pub value: f64,
    /// Per-order precisions in [0, 1] after smoothing; orders with no
    /// hypothesis n-grams report 0 and are left out of the mean.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
}

/// BLEU from accumulated statistics.
pub fn corpus_bleu(stats: &NGramStats, smoothing: Smoothing) -> BleuScore {
    let mut precisions = [0.0; MAX_ORDER];
    if stats.hyp_len == 0 {
        return BleuScore {
            value: 0.0,
            precisions,
            brevity_penalty: 0.0,
        };
    }
    let brevity_penalty = if stats.hyp_len < stats.ref_len {
        (1.0 - stats.ref_len as f64 / stats.hyp_len as f64).exp()
    } else {
        1.0
    };

    // no match at any order scores 0 regardless of smoothing
    if stats.clipped_matches.iter().all(|&m| m == 0) {
        return BleuScore {
            value: 0.0,
            precisions,
            brevity_penalty,
        };
    }

    let mut smooth = 1.0;
    let mut used = 0;
    let mut log_sum = 0.0;
    for (o, slot) in precisions.iter_mut().enumerate() {
        let total = stats.hyp_ngrams[o];
        if total == 0 {
            break;
        }
        let matches = stats.clipped_matches[o];
        let p = if matches > 0 {
            matches as f64 / total as f64
        } else {
            match smoothing {
                Smoothing::Exp => {
                    smooth *= 2.0;
                    1.0 / (smooth * total as f64)
                }
                Smoothing::None => 0.0,
            }
        };
        *slot = p;
        used += 1;
        log_sum += p.ln();
    }
    let value = if precisions[..used].contains(&0.0) {
        0.0
    } else {
        100.0 * brevity_penalty * (log_sum / used as f64).exp()
    };
    BleuScore {
        value,
        precisions,
        brevity_penalty,
    }
}

/// Smoothed sentence BLEU of a raw hypothesis against raw references.
pub fn sentence_bleu<S: AsRef<str>>(hyp: &str, refs: &[S]) -> f64 {
    let stats = ReferenceCounts::from_raw(refs).stats(&tokenize_13a(hyp));
    corpus_bleu(&stats, Smoothing::Exp).value
}

/// Corpus BLEU of raw hypotheses against per-sentence raw references.
pub fn corpus_bleu_raw<H: AsRef<str>, R: AsRef<str>>(
    hyps: &[H],
    refs: &[Vec<R>],
    smoothing: Smoothing,
) -> BleuScore {
    let stats: NGramStats = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| ReferenceCounts::from_raw(r).stats(&tokenize_13a(h.as_ref())))
        .sum();
    corpus_bleu(&stats, smoothing)
}

/// BLEU statistics of every hypothesis of an n-best corpus against the
/// sentence's references.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisStats {
    stats: Vec<Vec<NGramStats>>,
}

impl HypothesisStats {
    pub fn compute(corpus: &NBestCorpus, refs: &ReferenceSet) -> Result<Self> {
        refs.check_aligned(corpus.len())?;
        let stats = corpus
            .lists()
            .par_iter()
            .zip(refs.iter().collect::<Vec<_>>())
            .map(|(list, r)| {
                let rc = ReferenceCounts::from_raw(r);
                list.iter()
                    .map(|e| rc.stats(&tokenize_13a(&e.text)))
                    .collect()
            })
            .collect();
        Ok(Self { stats })
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    pub fn get(&self, sid: usize, rank: usize) -> &NGramStats {
        &self.stats[sid][rank]
    }

    pub fn sentence(&self, sid: usize) -> &[NGramStats] {
        &self.stats[sid]
    }

    /// Smoothed sentence BLEU of every hypothesis.
    pub fn sentence_bleu(&self) -> Vec<Vec<f64>> {
        self.stats
            .iter()
            .map(|l| {
                l.iter()
                    .map(|s| corpus_bleu(s, Smoothing::Exp).value)
                    .collect()
            })
            .collect()
    }

    /// Corpus BLEU of one selected rank per sentence.
    pub fn corpus_bleu(&self, selections: &[usize]) -> BleuScore {
        let total: NGramStats = self.stats.iter().zip(selections).map(|(l, &r)| l[r]).sum();
        corpus_bleu(&total, Smoothing::Exp)
    }
}

/// Additive character n-gram statistics for chrF.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChrfStats {
    pub hyp_ngrams: [u64; CHRF_ORDER],
    pub ref_ngrams: [u64; CHRF_ORDER],
    pub matches: [u64; CHRF_ORDER],
}

impl AddAssign for ChrfStats {
    fn add_assign(&mut self, rhs: Self) {
        for o in 0..CHRF_ORDER {
            self.hyp_ngrams[o] += rhs.hyp_ngrams[o];
            self.ref_ngrams[o] += rhs.ref_ngrams[o];
            self.matches[o] += rhs.matches[o];
        }
    }
}

impl Sum for ChrfStats {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |mut a, b| {
            a += b;
            a
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChrFScore {
    /// In [0, 100].
    pub value: f64,
    pub precision: f64,
    pub recall: f64,
    pub beta: f64,
    pub char_order: usize,
}

fn normalize_for_chrf(text: &str) -> Vec<char> {
    let mut out = Vec::with_capacity(text.len());
    for word in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars());
    }
    out
}

fn char_ngram_counts(chars: &[char], order: usize) -> HashMap<&[char], u64> {
    let mut counts = HashMap::new();
    if chars.len() >= order {
        for w in chars.windows(order) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// chrF statistics of one hypothesis against one reference.
pub fn chrf_stats(hyp: &str, reference: &str) -> ChrfStats {
    let h = normalize_for_chrf(hyp);
    let r = normalize_for_chrf(reference);
    let mut stats = ChrfStats::default();
    for o in 0..CHRF_ORDER {
        let hc = char_ngram_counts(&h, o + 1);
        let rc = char_ngram_counts(&r, o + 1);
        stats.hyp_ngrams[o] = hc.values().sum();
        stats.ref_ngrams[o] = rc.values().sum();
        stats.matches[o] = hc
            .iter()
            .map(|(g, &c)| rc.get(g).map_or(0, |&rcount| c.min(rcount)))
            .sum();
    }
    stats
}

/// chrF from accumulated statistics.
pub fn chrf_from_stats(stats: &ChrfStats) -> ChrFScore {
    let mut precision = 0.0;
    let mut recall = 0.0;
    let mut used = 0;
    for o in 0..CHRF_ORDER {
        if stats.hyp_ngrams[o] > 0 && stats.ref_ngrams[o] > 0 {
            precision += stats.matches[o] as f64 / stats.hyp_ngrams[o] as f64;
            recall += stats.matches[o] as f64 / stats.ref_ngrams[o] as f64;
            used += 1;
        }
    }
    let mut score = ChrFScore {
        value: 0.0,
        precision: 0.0,
        recall: 0.0,
        beta: CHRF_BETA,
        char_order: CHRF_ORDER,
    };
    if used == 0 {
        return score;
    }
    precision /= used as f64;
    recall /= used as f64;
    score.precision = precision;
    score.recall = recall;
    if precision + recall > 0.0 {
        let b2 = CHRF_BETA * CHRF_BETA;
        score.value = 100.0 * (1.0 + b2) * precision * recall / (b2 * precision + recall);
    }
    score
}

/// Statistics against the best-matching reference (highest sentence chrF,
/// first reference on ties).
pub fn best_chrf_stats<S: AsRef<str>>(hyp: &str, refs: &[S]) -> ChrfStats {
    let mut best: Option<(f64, ChrfStats)> = None;
    for r in refs {
        let s = chrf_stats(hyp, r.as_ref());
        let v = chrf_from_stats(&s).value;
        if best.is_none_or(|(bv, _)| v > bv) {
            best = Some((v, s));
        }
    }
    best.map(|(_, s)| s).unwrap_or_default()
}

pub fn sentence_chrf<S: AsRef<str>>(hyp: &str, refs: &[S]) -> ChrFScore {
    chrf_from_stats(&best_chrf_stats(hyp, refs))
}

/// Corpus chrF: statistics are summed over sentences before the F-score.
pub fn corpus_chrf<H: AsRef<str>, R: AsRef<str>>(pairs: &[(H, Vec<R>)]) -> ChrFScore {
    let stats: ChrfStats = pairs
        .iter()
        .map(|(h, r)| best_chrf_stats(h.as_ref(), r))
        .sum();
    chrf_from_stats(&stats)
}

/// Signature line in the usual `key:value|...` form.
pub fn bleu_signature(nrefs: usize, smoothing: Smoothing) -> String {
    format!(
        "nrefs:{nrefs}|case:mixed|eff:no|tok:13a|smooth:{}|version:{}",
        smoothing.name(),
        env!("CARGO_PKG_VERSION")
    )
}

pub fn chrf_signature(nrefs: usize) -> String {
    format!(
        "nrefs:{nrefs}|case:mixed|eff:yes|nc:{CHRF_ORDER}|nw:0|space:yes|version:{}",
        env!("CARGO_PKG_VERSION")
    )
}
