//! Pseudo-label strategies and transfer-set assembly.

use std::collections::BTreeMap;
use std::fmt;

use crate::corpus::{
    render_pseudo_labels, LabelFormat, NBestCorpus, ReferenceSet, RenderedLabels, SourceCorpus,
};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::metrics::HypothesisStats;
use crate::mira::WeightVector;
use crate::rerank::{first_argmax, rerank, SelectionMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Teacher's own best hypothesis.
    KdTop1,
    /// Best hypothesis by BLEU against the original labels.
    Ki,
    /// Log-linear reranker.
    Rerank,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::KdTop1 => "kd_top1",
            Strategy::Ki => "ki",
            Strategy::Rerank => "rerank",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub labels: BTreeMap<usize, String>,
    pub strategy: Strategy,
    pub provenance: String,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Rank-0 hypothesis of every list.
pub fn kd_top1(corpus: &NBestCorpus) -> PseudoLabelSet {
    PseudoLabelSet {
        labels: corpus
            .lists()
            .iter()
            .enumerate()
            .map(|(sid, l)| (sid, l[0].text.clone()))
            .collect(),
        strategy: Strategy::KdTop1,
        provenance: "rank 0 of the teacher n-best list".into(),
    }
}

/// Per sentence, the hypothesis with the highest sentence BLEU against the
/// original references.
pub fn ki_select(corpus: &NBestCorpus, original_refs: &ReferenceSet) -> Result<PseudoLabelSet> {
    let gains = HypothesisStats::compute(corpus, original_refs)?.sentence_bleu();
    Ok(PseudoLabelSet {
        labels: gains
            .iter()
            .enumerate()
            .map(|(sid, g)| (sid, corpus.list(sid)[first_argmax(g)].text.clone()))
            .collect(),
        strategy: Strategy::Ki,
        provenance: format!(
            "sentence BLEU against {} original reference(s)",
            original_refs.max_refs()
        ),
    })
}

/// Labels selected by the log-linear reranker.
pub fn rerank_labels(
    matrix: &FeatureMatrix,
    corpus: &NBestCorpus,
    weights: &WeightVector,
    mask: Option<&SelectionMask>,
) -> Result<PseudoLabelSet> {
    let result = rerank(matrix, corpus, weights, mask)?;
    let active = match mask {
        Some(m) => m.active.join(","),
        None => weights.names().join(","),
    };
    Ok(PseudoLabelSet {
        labels: result.labels(),
        strategy: Strategy::Rerank,
        provenance: format!("log-linear reranker over [{active}]"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    BitextOnly,
    BitextPlusMono,
    MonoOnly,
}

impl std::str::FromStr for TransferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bitext_only" | "bitext" => Ok(Self::BitextOnly),
            "bitext_plus_mono" | "both" => Ok(Self::BitextPlusMono),
            "mono_only" | "mono" => Ok(Self::MonoOnly),
            other => Err(Error::Config(format!("unknown transfer mode `{other}`"))),
        }
    }
}

/// Pseudo-labels paired with their source sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub sources: SourceCorpus,
    pub labels: PseudoLabelSet,
}

impl LabeledSet {
    pub fn new(sources: SourceCorpus, labels: PseudoLabelSet) -> Result<Self> {
        if labels.len() != sources.len() || labels.labels.keys().enumerate().any(|(i, &k)| i != k) {
            return Err(Error::Misaligned(format!(
                "{} sources but labels for {} sentences",
                sources.len(),
                labels.len()
            )));
        }
        Ok(Self { sources, labels })
    }
}

/// Concatenates the selected sets (bitext first) with dense renumbering.
pub fn mix_transfer_sets(
    bitext: Option<&LabeledSet>,
    mono: Option<&LabeledSet>,
    mode: TransferMode,
) -> Result<(SourceCorpus, BTreeMap<usize, String>)> {
    fn require<'a>(set: Option<&'a LabeledSet>, what: &str) -> Result<&'a LabeledSet> {
        set.ok_or_else(|| Error::Config(format!("transfer mode needs the {what} set")))
    }
    let parts: Vec<&LabeledSet> = match mode {
        TransferMode::BitextOnly => vec![require(bitext, "bitext")?],
        TransferMode::MonoOnly => vec![require(mono, "monolingual")?],
        TransferMode::BitextPlusMono => {
            vec![require(bitext, "bitext")?, require(mono, "monolingual")?]
        }
    };
    let mut sources = SourceCorpus::default();
    let mut labels = BTreeMap::new();
    for part in parts {
        for (src, label) in part
            .sources
            .sentences
            .iter()
            .zip(part.labels.labels.values())
        {
            labels.insert(sources.len(), label.clone());
            sources.sentences.push(src.clone());
        }
    }
    Ok((sources, labels))
}

/// Mixes and renders a transfer set in the given format.
pub fn render_transfer_set(
    bitext: Option<&LabeledSet>,
    mono: Option<&LabeledSet>,
    mode: TransferMode,
    format: LabelFormat,
) -> Result<RenderedLabels> {
    let (sources, labels) = mix_transfer_sets(bitext, mono, mode)?;
    render_pseudo_labels(&sources, &labels, format)
}
