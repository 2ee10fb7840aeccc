//! Per-hypothesis feature matrices.
//!
//! Columns come in a fixed order: teacher-score passthroughs, then native
//! features (MBR consensus and length), then external score tables.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::corpus::{parse_decimal, ExternalScoreTable, NBestCorpus};
use crate::error::{Error, Result};
use crate::metrics::{self, ReferenceCounts, Smoothing};

const HEADER_TAG: &str = "#features";

/// Feature values of one sentence's n-best list, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceFeatures {
    width: usize,
    values: Vec<f64>,
}

impl SentenceFeatures {
    pub fn from_rows(width: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut values = Vec::with_capacity(rows.len() * width);
        for (rank, r) in rows.iter().enumerate() {
            if r.len() != width {
                return Err(Error::Misaligned(format!(
                    "rank {rank} has {} values, expected {width}",
                    r.len()
                )));
            }
            values.extend_from_slice(r);
        }
        Ok(Self { width, values })
    }

    pub fn num_rows(&self) -> usize {
        self.values.len().checked_div(self.width).unwrap_or(0)
    }

    pub fn row(&self, rank: usize) -> &[f64] {
        &self.values[rank * self.width..(rank + 1) * self.width]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.width)
    }
}

/// The n x M table of feature values for every sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    names: Vec<String>,
    sentences: Vec<SentenceFeatures>,
}

impl FeatureMatrix {
    /// Builds a matrix from per-sentence row lists, checking shape, name
    /// uniqueness and finiteness.
    pub fn new(names: Vec<String>, sentences: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::ZeroFeatures);
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::DuplicateFeature(n.clone()));
            }
        }
        let width = names.len();
        let mut out = Vec::with_capacity(sentences.len());
        for (sid, rows) in sentences.iter().enumerate() {
            if rows.is_empty() {
                return Err(Error::Misaligned(format!("sentence {sid} has no rows")));
            }
            let sf = SentenceFeatures::from_rows(width, rows)
                .map_err(|e| Error::Misaligned(format!("sentence {sid}: {e}")))?;
            for (rank, row) in sf.rows().enumerate() {
                if let Some(m) = row.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        sid,
                        rank,
                        name: names[m].clone(),
                    });
                }
            }
            out.push(sf);
        }
        Ok(Self {
            names,
            sentences: out,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_features(&self) -> usize {
        self.names.len()
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn sentence(&self, sid: usize) -> &SentenceFeatures {
        &self.sentences[sid]
    }

    pub fn sentences(&self) -> &[SentenceFeatures] {
        &self.sentences
    }

    pub fn row(&self, sid: usize, rank: usize) -> &[f64] {
        self.sentences[sid].row(rank)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Checks that the matrix has a row for exactly every corpus hypothesis.
    pub fn check_aligned(&self, corpus: &NBestCorpus) -> Result<()> {
        if self.len() != corpus.len() {
            return Err(Error::Misaligned(format!(
                "matrix has {} sentences, n-best corpus has {}",
                self.len(),
                corpus.len()
            )));
        }
        for (sid, (sf, list)) in self.sentences.iter().zip(corpus.lists()).enumerate() {
            if sf.num_rows() != list.len() {
                return Err(Error::Misaligned(format!(
                    "sentence {sid}: matrix has {} rows, n-best list has {}",
                    sf.num_rows(),
                    list.len()
                )));
            }
        }
        Ok(())
    }

    /// Keeps the first `n` rows of every sentence.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.max(1);
        let sentences = self
            .sentences
            .iter()
            .map(|s| SentenceFeatures {
                width: s.width,
                values: s.values[..s.width * n.min(s.num_rows())].to_vec(),
            })
            .collect();
        Self {
            names: self.names.clone(),
            sentences,
        }
    }

    /// Horizontal concatenation; `other`'s columns follow `self`'s.
    pub fn hconcat(&self, other: &FeatureMatrix) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::Misaligned(
                "matrices differ in sentence count".into(),
            ));
        }
        let mut names = self.names.clone();
        names.extend(other.names.iter().cloned());
        let sentences = self
            .sentences
            .iter()
            .zip(&other.sentences)
            .map(|(a, b)| {
                if a.num_rows() != b.num_rows() {
                    return Err(Error::Misaligned("matrices differ in row count".into()));
                }
                Ok(a.rows()
                    .zip(b.rows())
                    .map(|(x, y)| x.iter().chain(y).copied().collect())
                    .collect())
            })
            .collect::<Result<Vec<Vec<Vec<f64>>>>>()?;
        Self::new(names, sentences)
    }

    /// Writes the `#features` header followed by `SID\tRANK\tV1..VM` rows.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "{HEADER_TAG}")?;
        for n in &self.names {
            write!(out, "\t{n}")?;
        }
        writeln!(out)?;
        for (sid, sf) in self.sentences.iter().enumerate() {
            for (rank, row) in sf.rows().enumerate() {
                write!(out, "{sid}\t{rank}")?;
                for v in row {
                    write!(out, "\t{v}")?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(1, "missing header"))??;
        let mut fields = header.split('\t');
        if fields.next() != Some(HEADER_TAG) {
            return Err(Error::parse(
                1,
                format!("header must start with `{HEADER_TAG}`"),
            ));
        }
        let names: Vec<String> = fields.map(str::to_string).collect();
        let mut sentences: Vec<Vec<Vec<f64>>> = Vec::new();
        for (idx, line) in lines.enumerate() {
            let lineno = idx + 2;
            let line = line?;
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != names.len() + 2 {
                return Err(Error::parse(
                    lineno,
                    format!(
                        "expected {} fields, found {}",
                        names.len() + 2,
                        fields.len()
                    ),
                ));
            }
            let sid: usize = fields[0]
                .parse()
                .map_err(|_| Error::parse(lineno, "bad sentence id"))?;
            let rank: usize = fields[1]
                .parse()
                .map_err(|_| Error::parse(lineno, "bad rank"))?;
            if sid == sentences.len() {
                sentences.push(Vec::new());
            } else if sid + 1 != sentences.len() {
                return Err(Error::parse(
                    lineno,
                    format!("sentence id {sid} out of order"),
                ));
            }
            let rows = sentences.last_mut().expect("pushed above");
            if rank != rows.len() {
                return Err(Error::parse(lineno, format!("rank {rank} out of order")));
            }
            let row = fields[2..]
                .iter()
                .map(|f| {
                    parse_decimal(f).ok_or_else(|| Error::parse(lineno, format!("bad value `{f}`")))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Self::new(names, sentences)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
        Self::read_tsv(std::io::BufReader::new(f))
    }

    pub fn to_path(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_tsv(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::file(path, e))
    }
}

/// Features computed in-process from the n-best list itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NativeFeature {
    MbrBleu,
    MbrChrf,
    Len,
    LenRatio,
}

impl NativeFeature {
    pub const ALL: [NativeFeature; 4] = [Self::MbrBleu, Self::MbrChrf, Self::Len, Self::LenRatio];

    pub fn name(self) -> &'static str {
        match self {
            Self::MbrBleu => "mbr_bleu",
            Self::MbrChrf => "mbr_chrf",
            Self::Len => "len",
            Self::LenRatio => "len_ratio",
        }
    }
}

impl fmt::Display for NativeFeature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NativeFeature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::UnknownNative(s.to_string()))
    }
}

/// Pairwise similarity used for MBR consensus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Utility {
    SentenceBleu,
    SentenceChrf,
}

/// Consensus utility of every hypothesis: its mean similarity to the other
/// members of the list (hypothesis scored against each other member taken
/// as reference). A single-element list is scored against itself.
pub fn mbr_utility<S: AsRef<str>>(list: &[S], utility: Utility) -> Vec<f64> {
    let n = list.len();
    if n == 0 {
        return Vec::new();
    }
    match utility {
        Utility::SentenceBleu => {
            let toks: Vec<Vec<String>> = list
                .iter()
                .map(|t| metrics::tokenize_13a(t.as_ref()))
                .collect();
            let refs: Vec<ReferenceCounts> = toks
                .iter()
                .map(|t| ReferenceCounts::new(std::slice::from_ref(t)))
                .collect();
            let pair = |i: usize, j: usize| {
                metrics::corpus_bleu(&refs[j].stats(&toks[i]), Smoothing::Exp).value
            };
            consensus(n, pair)
        }
        Utility::SentenceChrf => {
            let pair = |i: usize, j: usize| {
                metrics::chrf_from_stats(&metrics::chrf_stats(list[i].as_ref(), list[j].as_ref()))
                    .value
            };
            consensus(n, pair)
        }
    }
}

fn consensus(n: usize, pair: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    if n == 1 {
        return vec![pair(0, 0)];
    }
    (0..n)
        .map(|i| {
            let sum: f64 = (0..n).filter(|&j| j != i).map(|j| pair(i, j)).sum();
            sum / (n - 1) as f64
        })
        .collect()
}

/// Token count and token count relative to the list mean (13a tokens).
pub fn length_features<S: AsRef<str>>(list: &[S]) -> (Vec<f64>, Vec<f64>) {
    let lens: Vec<f64> = list
        .iter()
        .map(|t| metrics::tokenize_13a(t.as_ref()).len() as f64)
        .collect();
    let mean = lens.iter().sum::<f64>() / lens.len().max(1) as f64;
    let ratios = lens
        .iter()
        .map(|&l| if mean > 0.0 { l / mean } else { 1.0 })
        .collect();
    (lens, ratios)
}

/// One column per requested teacher score, in requested order. Returned as
/// `[sentence][rank][column]`.
pub fn passthrough_features(corpus: &NBestCorpus, names: &[String]) -> Result<Vec<Vec<Vec<f64>>>> {
    corpus
        .lists()
        .iter()
        .map(|list| {
            list.iter()
                .map(|e| {
                    names
                        .iter()
                        .map(|n| {
                            e.score(n).ok_or_else(|| Error::MissingTeacherScore {
                                sid: e.sid,
                                rank: e.rank,
                                name: n.clone(),
                            })
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Which features to assemble.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FeatureSpec {
    pub passthrough: Vec<String>,
    pub native: Vec<NativeFeature>,
}

impl FeatureSpec {
    pub fn column_names(&self, external: &[ExternalScoreTable]) -> Vec<String> {
        self.passthrough
            .iter()
            .cloned()
            .chain(self.native.iter().map(|f| f.name().to_string()))
            .chain(external.iter().map(|t| t.feature_name.clone()))
            .collect()
    }
}

fn native_columns<S: AsRef<str> + Sync>(list: &[S], native: &[NativeFeature]) -> Vec<Vec<f64>> {
    let mut lengths = None;
    native
        .iter()
        .map(|f| match f {
            NativeFeature::MbrBleu => mbr_utility(list, Utility::SentenceBleu),
            NativeFeature::MbrChrf => mbr_utility(list, Utility::SentenceChrf),
            NativeFeature::Len => lengths
                .get_or_insert_with(|| length_features(list))
                .0
                .clone(),
            NativeFeature::LenRatio => lengths
                .get_or_insert_with(|| length_features(list))
                .1
                .clone(),
        })
        .collect()
}

/// Builds the feature matrix of a corpus. Every external table must cover
/// exactly the corpus's hypotheses and all names must be unique.
pub fn assemble_matrix(
    corpus: &NBestCorpus,
    spec: &FeatureSpec,
    external: &[ExternalScoreTable],
) -> Result<FeatureMatrix> {
    let names = spec.column_names(external);
    if names.is_empty() {
        return Err(Error::ZeroFeatures);
    }
    for (i, n) in names.iter().enumerate() {
        if names[..i].contains(n) {
            return Err(Error::DuplicateFeature(n.clone()));
        }
    }
    for t in external {
        t.validate(corpus)?;
    }
    let pass = passthrough_features(corpus, &spec.passthrough)?;
    let native: Vec<Vec<Vec<f64>>> = corpus
        .lists()
        .par_iter()
        .map(|list| {
            let texts: Vec<&str> = list.iter().map(|e| e.text.as_str()).collect();
            native_columns(&texts, &spec.native)
        })
        .collect();

    let sentences = corpus
        .lists()
        .iter()
        .enumerate()
        .map(|(sid, list)| {
            (0..list.len())
                .map(|rank| {
                    let mut row = pass[sid][rank].clone();
                    row.extend(native[sid].iter().map(|col| col[rank]));
                    row.extend(
                        external
                            .iter()
                            .map(|t| t.get(sid, rank).expect("validated")),
                    );
                    row
                })
                .collect()
        })
        .collect();
    FeatureMatrix::new(names, sentences)
}
