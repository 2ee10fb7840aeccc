//! Log-linear reranking, magnitude-based model selection and oracle analysis.
//!
//! Every argmax/argmin in this module breaks ties toward the lowest rank.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;

use crate::corpus::{NBestCorpus, ReferenceSet};
use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, SentenceFeatures};
use crate::metrics::{BleuScore, HypothesisStats};
use crate::mira::WeightVector;

#[derive(Debug, Clone, PartialEq)]
pub struct RerankResult {
    /// Selected rank per sentence id.
    pub selections: Vec<usize>,
    pub selected_texts: Vec<String>,
    pub corpus_score: Option<BleuScore>,
}

impl RerankResult {
    fn from_selections(corpus: &NBestCorpus, selections: Vec<usize>) -> Self {
        let selected_texts = selections
            .iter()
            .enumerate()
            .map(|(sid, &r)| corpus.list(sid)[r].text.clone())
            .collect();
        Self {
            selections,
            selected_texts,
            corpus_score: None,
        }
    }

    pub fn labels(&self) -> BTreeMap<usize, String> {
        self.selected_texts.iter().cloned().enumerate().collect()
    }

    /// `SID\tRANK\tTEXT` lines.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        for (sid, (rank, text)) in self.selections.iter().zip(&self.selected_texts).enumerate() {
            writeln!(out, "{sid}\t{rank}\t{text}")?;
        }
        Ok(())
    }
}

/// The features a reranker is allowed to use.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMask {
    /// Active feature names, ordered by decreasing |weight| then name.
    pub active: Vec<String>,
    pub k: usize,
}

impl SelectionMask {
    pub fn is_active(&self, name: &str) -> bool {
        self.active.iter().any(|a| a == name)
    }
}

/// Keeps the `k` features with the largest |weight|; equal magnitudes are
/// ordered by name.
pub fn select_models(weights: &WeightVector, k: usize) -> SelectionMask {
    let mut order: Vec<(f64, &str)> = weights.iter().map(|(n, w)| (w.abs(), n)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    SelectionMask {
        active: order
            .into_iter()
            .take(k)
            .map(|(_, n)| n.to_string())
            .collect(),
        k,
    }
}

/// Model score of every row, summing only active columns.
pub fn model_scores(sf: &SentenceFeatures, weights: &[f64], active: Option<&[bool]>) -> Vec<f64> {
    sf.rows()
        .map(|row| {
            row.iter()
                .zip(weights)
                .enumerate()
                .filter(|(m, _)| active.is_none_or(|a| a[*m]))
                .map(|(_, (f, w))| w * f)
                .sum()
        })
        .collect()
}

/// Index of the first maximum.
pub fn first_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Index of the first minimum.
pub fn first_argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Per-sentence argmax of the weighted feature sum. `weights` must already
/// be in matrix column order.
pub fn select(
    matrix: &FeatureMatrix,
    weights: &[f64],
    active: Option<&[bool]>,
) -> Result<Vec<usize>> {
    if weights.len() != matrix.num_features() {
        return Err(Error::NameMismatch(format!(
            "{} weights for {} features",
            weights.len(),
            matrix.num_features()
        )));
    }
    matrix
        .sentences()
        .par_iter()
        .enumerate()
        .map(|(sid, sf)| {
            let scores = model_scores(sf, weights, active);
            if let Some(rank) = scores.iter().position(|s| !s.is_finite()) {
                return Err(Error::NonFinite {
                    sid,
                    rank,
                    name: "<model score>".into(),
                });
            }
            Ok(first_argmax(&scores))
        })
        .collect()
}

fn active_flags(matrix: &FeatureMatrix, mask: Option<&SelectionMask>) -> Result<Option<Vec<bool>>> {
    let Some(mask) = mask else { return Ok(None) };
    if let Some(unknown) = mask
        .active
        .iter()
        .find(|a| matrix.column_index(a).is_none())
    {
        return Err(Error::NameMismatch(format!(
            "mask names unknown feature `{unknown}`"
        )));
    }
    Ok(Some(
        matrix.names().iter().map(|n| mask.is_active(n)).collect(),
    ))
}

/// Reranks every n-best list with the log-linear model.
pub fn rerank(
    matrix: &FeatureMatrix,
    corpus: &NBestCorpus,
    weights: &WeightVector,
    mask: Option<&SelectionMask>,
) -> Result<RerankResult> {
    matrix.check_aligned(corpus)?;
    let w = weights.aligned_to(matrix.names())?;
    let active = active_flags(matrix, mask)?;
    let selections = select(matrix, &w, active.as_deref())?;
    Ok(RerankResult::from_selections(corpus, selections))
}

/// [`rerank`] plus the corpus BLEU of the selections.
pub fn rerank_scored(
    matrix: &FeatureMatrix,
    corpus: &NBestCorpus,
    weights: &WeightVector,
    mask: Option<&SelectionMask>,
    refs: &ReferenceSet,
) -> Result<RerankResult> {
    let mut result = rerank(matrix, corpus, weights, mask)?;
    let stats = HypothesisStats::compute(corpus, refs)?;
    result.corpus_score = Some(stats.corpus_bleu(&result.selections));
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMode {
    Oracle,
    AntiOracle,
}

/// Greedy per-sentence selection by smoothed sentence BLEU: the best
/// (oracle) or worst (anti-oracle) hypothesis of each list.
pub fn oracle_select(
    corpus: &NBestCorpus,
    refs: &ReferenceSet,
    mode: OracleMode,
) -> Result<RerankResult> {
    let stats = HypothesisStats::compute(corpus, refs)?;
    Ok(oracle_from_stats(corpus, &stats, mode))
}

fn oracle_from_stats(
    corpus: &NBestCorpus,
    stats: &HypothesisStats,
    mode: OracleMode,
) -> RerankResult {
    let selections = stats
        .sentence_bleu()
        .iter()
        .map(|g| match mode {
            OracleMode::Oracle => first_argmax(g),
            OracleMode::AntiOracle => first_argmin(g),
        })
        .collect();
    let mut result = RerankResult::from_selections(corpus, selections);
    result.corpus_score = Some(stats.corpus_bleu(&result.selections));
    result
}

/// One row of a beam-size sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub n: usize,
    pub anti_oracle: BleuScore,
    pub top1: BleuScore,
    pub oracle: BleuScore,
    /// Lists that had fewer than `n` hypotheses.
    pub short_lists: usize,
    /// Per-sentence sentence BLEU of the oracle / anti-oracle selections.
    pub oracle_sentence_bleu: Vec<f64>,
    pub anti_sentence_bleu: Vec<f64>,
}

impl SweepRow {
    /// `n\tanti\ttop1\toracle\n` with two decimals.
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{:.2}\t{:.2}\t{:.2}\n",
            self.n, self.anti_oracle.value, self.top1.value, self.oracle.value
        )
    }
}

pub const SWEEP_HEADER: &str = "#beam\tanti_oracle\ttop1\toracle\n";

/// Anti-oracle, top-1 and oracle corpus BLEU for each list prefix length.
pub fn beam_sweep(
    corpus: &NBestCorpus,
    refs: &ReferenceSet,
    sizes: &[usize],
) -> Result<Vec<SweepRow>> {
    if sizes.is_empty() {
        return Err(Error::Config("empty sweep".into()));
    }
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("sweep sizes must be non-decreasing".into()));
    }
    if let Some(&bad) = sizes.iter().find(|&&n| n == 0 || n > corpus.n_max()) {
        return Err(Error::Config(format!(
            "sweep size {bad} outside 1..={}",
            corpus.n_max()
        )));
    }
    let stats = HypothesisStats::compute(corpus, refs)?;
    let g = stats.sentence_bleu();
    let top1 = stats.corpus_bleu(&vec![0; corpus.len()]);
    Ok(sizes
        .iter()
        .map(|&n| {
            let short_lists = corpus.lists().iter().filter(|l| l.len() < n).count();
            let prefix = |l: &[f64]| l[..n.min(l.len())].to_vec();
            let oracle: Vec<usize> = g.iter().map(|l| first_argmax(&prefix(l))).collect();
            let anti: Vec<usize> = g.iter().map(|l| first_argmin(&prefix(l))).collect();
            SweepRow {
                n,
                anti_oracle: stats.corpus_bleu(&anti),
                top1,
                oracle: stats.corpus_bleu(&oracle),
                short_lists,
                oracle_sentence_bleu: oracle.iter().enumerate().map(|(s, &r)| g[s][r]).collect(),
                anti_sentence_bleu: anti.iter().enumerate().map(|(s, &r)| g[s][r]).collect(),
            }
        })
        .collect())
}
