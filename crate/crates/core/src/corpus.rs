//! Corpus data model and line-oriented I/O.
//!
//! Four on-disk formats are handled here:
//!
//! * n-best lists: `SID ||| TEXT ||| NAME= VALUE ... ||| TOTAL`, one hypothesis
//!   per line, grouped by non-decreasing SID;
//! * external score tables: `SID\tRANK\tSCORE`, no header;
//! * one-sentence-per-line source and reference files;
//! * pseudo-label outputs, either aligned `.src`/`.tgt` files or a
//!   `SOURCE\tTARGET` TSV.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const FIELD_SEP: &str = " ||| ";
const SEP_TOKEN: &str = "|||";

/// One hypothesis of an n-best list.
#[derive(Debug, Clone, PartialEq)]
pub struct NBestEntry {
    pub sid: usize,
    pub rank: usize,
    pub text: String,
    /// Named scores in file order.
    pub teacher_scores: Vec<(String, f64)>,
    pub total: f64,
}

impl NBestEntry {
    /// Looks up a teacher score; the reserved name `total` maps to the
    /// combined score.
    pub fn score(&self, name: &str) -> Option<f64> {
        if name == "total" {
            return Some(self.total);
        }
        self.teacher_scores
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }
}

/// All n-best lists of a corpus, indexed densely by sentence id.
#[derive(Debug, Clone, PartialEq)]
pub struct NBestCorpus {
    lists: Vec<Vec<NBestEntry>>,
    n_max: usize,
}

impl NBestCorpus {
    /// Builds a corpus from per-sentence lists. Sentence ids and ranks are
    /// reassigned from list positions.
    pub fn from_lists(lists: Vec<Vec<NBestEntry>>) -> Result<Self> {
        if lists.is_empty() {
            return Err(Error::NoSentences);
        }
        let mut lists = lists;
        for (sid, list) in lists.iter_mut().enumerate() {
            if list.is_empty() {
                return Err(Error::Misaligned(format!(
                    "empty n-best list for sentence {sid}"
                )));
            }
            for (rank, entry) in list.iter_mut().enumerate() {
                check_text(&entry.text).map_err(|msg| {
                    Error::Misaligned(format!("sentence {sid} rank {rank}: {msg}"))
                })?;
                entry.sid = sid;
                entry.rank = rank;
            }
        }
        let n_max = lists.iter().map(Vec::len).max().unwrap_or(0);
        Ok(Self { lists, n_max })
    }

    /// Builds a corpus of bare hypothesis texts with no scores; the total
    /// of each entry is the negated rank so that rank order follows total.
    pub fn from_texts<S: AsRef<str>>(lists: &[Vec<S>]) -> Result<Self> {
        let lists = lists
            .iter()
            .map(|list| {
                list.iter()
                    .enumerate()
                    .map(|(rank, t)| NBestEntry {
                        sid: 0,
                        rank,
                        text: t.as_ref().to_string(),
                        teacher_scores: Vec::new(),
                        total: -(rank as f64),
                    })
                    .collect()
            })
            .collect();
        Self::from_lists(lists)
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn lists(&self) -> &[Vec<NBestEntry>] {
        &self.lists
    }

    pub fn list(&self, sid: usize) -> &[NBestEntry] {
        &self.lists[sid]
    }

    pub fn entry(&self, sid: usize, rank: usize) -> Option<&NBestEntry> {
        self.lists.get(sid).and_then(|l| l.get(rank))
    }

    /// Total number of hypotheses.
    pub fn num_entries(&self) -> usize {
        self.lists.iter().map(Vec::len).sum()
    }

    pub fn texts(&self, sid: usize) -> Vec<&str> {
        self.lists[sid].iter().map(|e| e.text.as_str()).collect()
    }

    /// Keeps the first `n` ranks of every list. Returns the truncated corpus
    /// and the number of lists that were already shorter than `n`.
    pub fn truncated(&self, n: usize) -> (Self, usize) {
        let n = n.max(1);
        let mut short = 0;
        let lists: Vec<Vec<NBestEntry>> = self
            .lists
            .iter()
            .map(|l| {
                if l.len() < n {
                    short += 1;
                }
                l.iter().take(n).cloned().collect()
            })
            .collect();
        let n_max = lists.iter().map(Vec::len).max().unwrap_or(0);
        (Self { lists, n_max }, short)
    }

    /// Returns `true` when every list is sorted by `total`, descending.
    pub fn rank_order_follows_total(&self) -> bool {
        self.lists
            .iter()
            .all(|l| l.windows(2).all(|w| w[0].total >= w[1].total))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::file(path, e))?;
        load_nbest(BufReader::new(f))
    }
}

fn check_text(text: &str) -> std::result::Result<(), &'static str> {
    if text.contains('\n') || text.contains('\r') {
        return Err("hypothesis contains a newline");
    }
    if text.contains(SEP_TOKEN) {
        return Err("hypothesis contains the field separator `|||`");
    }
    Ok(())
}

/// Parses a plain decimal (`-12.5`, `3`, `.5`, `1e-3`). Rejects `inf`,
/// `nan`, hex and leading `+`.
pub fn parse_decimal(s: &str) -> Option<f64> {
    let body = s.strip_prefix('-').unwrap_or(s);
    let (mantissa, exponent) = match body.find(['e', 'E']) {
        Some(i) => (&body[..i], Some(&body[i + 1..])),
        None => (body, None),
    };
    let mut digits = 0;
    let mut dots = 0;
    for c in mantissa.chars() {
        match c {
            '0'..='9' => digits += 1,
            '.' => dots += 1,
            _ => return None,
        }
    }
    if digits == 0 || dots > 1 {
        return None;
    }
    if let Some(exp) = exponent {
        let exp = exp.strip_prefix(['+', '-']).unwrap_or(exp);
        if exp.is_empty() || !exp.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn parse_teacher_scores(field: &str, line: usize) -> Result<Vec<(String, f64)>> {
    let mut scores: Vec<(String, f64)> = Vec::new();
    let mut tokens = field.split(' ').filter(|t| !t.is_empty()).peekable();
    while let Some(tok) = tokens.next() {
        let name = tok
            .strip_suffix('=')
            .filter(|n| !n.is_empty())
            .ok_or_else(|| Error::parse(line, format!("expected `NAME=`, found `{tok}`")))?;
        let value = tokens
            .next()
            .ok_or_else(|| Error::parse(line, format!("score `{name}` has no value")))?;
        let value = parse_decimal(value)
            .ok_or_else(|| Error::parse(line, format!("bad value `{value}` for score `{name}`")))?;
        if let Some(next) = tokens.peek() {
            if !next.ends_with('=') {
                return Err(Error::parse(
                    line,
                    format!("score `{name}` has more than one value"),
                ));
            }
        }
        if scores.iter().any(|(n, _)| n == name) {
            return Err(Error::parse(line, format!("score `{name}` repeated")));
        }
        scores.push((name.to_string(), value));
    }
    Ok(scores)
}

/// Reads an n-best list. Ranks are assigned by order of appearance within
/// each sentence id; duplicate texts are kept.
pub fn load_nbest<R: BufRead>(reader: R) -> Result<NBestCorpus> {
    let mut lists: Vec<Vec<NBestEntry>> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let fields: Vec<&str> = line.split(SEP_TOKEN).collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                lineno,
                format!("expected 4 `|||`-separated fields, found {}", fields.len()),
            ));
        }
        let sid_field = fields[0].trim_end_matches(' ');
        let sid: usize = sid_field
            .parse()
            .map_err(|_| Error::parse(lineno, format!("bad sentence id `{sid_field}`")))?;
        // exactly one separator space on each side belongs to the delimiter
        let text = fields[1].strip_prefix(' ').unwrap_or(fields[1]);
        let text = text.strip_suffix(' ').unwrap_or(text);
        check_text(text).map_err(|m| Error::parse(lineno, m))?;
        let teacher_scores = parse_teacher_scores(fields[2], lineno)?;
        let total_field = fields[3].trim_matches(' ');
        let total = parse_decimal(total_field)
            .ok_or_else(|| Error::parse(lineno, format!("bad total `{total_field}`")))?;

        match sid.cmp(&lists.len()) {
            std::cmp::Ordering::Equal => lists.push(Vec::new()),
            std::cmp::Ordering::Greater => {
                return Err(Error::parse(
                    lineno,
                    format!(
                        "non-dense sentence ids: expected {}, found {sid}",
                        lists.len()
                    ),
                ))
            }
            std::cmp::Ordering::Less if sid + 1 != lists.len() => {
                return Err(Error::parse(
                    lineno,
                    format!("sentence id {sid} out of order"),
                ))
            }
            std::cmp::Ordering::Less => {}
        }
        let list = lists.last_mut().expect("pushed above");
        list.push(NBestEntry {
            sid,
            rank: list.len(),
            text: text.to_string(),
            teacher_scores,
            total,
        });
    }
    if lists.is_empty() {
        return Err(Error::NoSentences);
    }
    let n_max = lists.iter().map(Vec::len).max().unwrap_or(0);
    Ok(NBestCorpus { lists, n_max })
}

/// Serialization dual of [`load_nbest`].
pub fn write_nbest<W: Write>(corpus: &NBestCorpus, mut out: W) -> Result<()> {
    for list in corpus.lists() {
        for e in list {
            let scores = e
                .teacher_scores
                .iter()
                .map(|(n, v)| format!("{n}= {v}"))
                .collect::<Vec<_>>()
                .join(" ");
            writeln!(
                out,
                "{}{FIELD_SEP}{}{FIELD_SEP}{}{FIELD_SEP}{}",
                e.sid, e.text, scores, e.total
            )?;
        }
    }
    Ok(())
}

/// Scores for every (sentence, rank) pair from one out-of-process model.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalScoreTable {
    pub feature_name: String,
    pub scores: BTreeMap<(usize, usize), f64>,
}

impl ExternalScoreTable {
    pub fn get(&self, sid: usize, rank: usize) -> Option<f64> {
        self.scores.get(&(sid, rank)).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Checks that the key set equals the corpus's (sentence, rank) set.
    /// Reports the smallest offending key.
    pub fn validate(&self, corpus: &NBestCorpus) -> Result<()> {
        for list in corpus.lists() {
            for e in list {
                if !self.scores.contains_key(&(e.sid, e.rank)) {
                    return Err(Error::MissingScore {
                        feature: self.feature_name.clone(),
                        key: (e.sid, e.rank),
                    });
                }
            }
        }
        if let Some(&key) = self
            .scores
            .keys()
            .find(|(s, r)| corpus.entry(*s, *r).is_none())
        {
            return Err(Error::ExtraScore {
                feature: self.feature_name.clone(),
                key,
            });
        }
        Ok(())
    }

    pub fn from_path(path: &Path, feature_name: &str) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::file(path, e))?;
        load_scores(BufReader::new(f), feature_name)
    }
}

fn parse_index(field: &str, what: &str, line: usize) -> Result<usize> {
    let v: i64 = field
        .parse()
        .map_err(|_| Error::parse(line, format!("bad {what} `{field}`")))?;
    usize::try_from(v).map_err(|_| Error::parse(line, format!("negative {what} {v}")))
}

/// Reads a `SID\tRANK\tSCORE` table. All duplicate keys are collected and
/// reported together, so the outcome does not depend on line order.
pub fn load_scores<R: BufRead>(reader: R, feature_name: &str) -> Result<ExternalScoreTable> {
    let mut scores = BTreeMap::new();
    let mut dups = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                lineno,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let sid = parse_index(fields[0], "sentence id", lineno)?;
        let rank = parse_index(fields[1], "rank", lineno)?;
        let score = parse_decimal(fields[2])
            .ok_or_else(|| Error::parse(lineno, format!("unparseable score `{}`", fields[2])))?;
        if scores.insert((sid, rank), score).is_some() {
            dups.push((sid, rank));
        }
    }
    if !dups.is_empty() {
        dups.sort_unstable();
        dups.dedup();
        return Err(Error::DuplicateKeys(dups));
    }
    Ok(ExternalScoreTable {
        feature_name: feature_name.to_string(),
        scores,
    })
}

/// Source sentences, indexed by sentence id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SourceCorpus {
    pub sentences: Vec<String>,
}

impl SourceCorpus {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::file(path, e))?;
        Ok(Self {
            sentences: read_nonempty_lines(BufReader::new(f))?,
        })
    }
}

/// One or more references per sentence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReferenceSet {
    refs: Vec<Vec<String>>,
}

impl ReferenceSet {
    pub fn new(refs: Vec<Vec<String>>) -> Result<Self> {
        for (sid, r) in refs.iter().enumerate() {
            if r.is_empty() {
                return Err(Error::Misaligned(format!(
                    "sentence {sid} has no reference"
                )));
            }
            if r.iter().any(|s| s.trim().is_empty()) {
                return Err(Error::Misaligned(format!(
                    "sentence {sid} has an empty reference"
                )));
            }
        }
        Ok(Self { refs })
    }

    /// Single-reference convenience constructor.
    pub fn single<S: AsRef<str>>(refs: &[S]) -> Result<Self> {
        Self::new(refs.iter().map(|r| vec![r.as_ref().to_string()]).collect())
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn get(&self, sid: usize) -> &[String] {
        &self.refs[sid]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[String]> {
        self.refs.iter().map(Vec::as_slice)
    }

    /// Largest number of references for any sentence.
    pub fn max_refs(&self) -> usize {
        self.refs.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn check_aligned(&self, sentences: usize) -> Result<()> {
        if self.refs.len() != sentences {
            return Err(Error::Misaligned(format!(
                "{} sentences but {} reference entries",
                sentences,
                self.refs.len()
            )));
        }
        Ok(())
    }

    /// Reads parallel reference streams. Line `i` of every stream is a
    /// reference for sentence `i`. The first stream must have a reference on
    /// every line; blank lines in later streams mean "no further reference".
    pub fn from_streams<R: BufRead>(streams: Vec<R>) -> Result<Self> {
        let mut refs: Vec<Vec<String>> = Vec::new();
        for (k, stream) in streams.into_iter().enumerate() {
            let lines: Vec<String> = stream.lines().collect::<std::io::Result<_>>()?;
            if k == 0 {
                for (i, l) in lines.into_iter().enumerate() {
                    if l.trim().is_empty() {
                        return Err(Error::parse(i + 1, "empty reference"));
                    }
                    refs.push(vec![l]);
                }
            } else {
                if lines.len() != refs.len() {
                    return Err(Error::LineCountMismatch(refs.len(), lines.len()));
                }
                for (r, l) in refs.iter_mut().zip(lines) {
                    if !l.trim().is_empty() {
                        r.push(l);
                    }
                }
            }
        }
        Ok(Self { refs })
    }

    pub fn from_paths<P: AsRef<Path>>(paths: &[P]) -> Result<Self> {
        if paths.is_empty() {
            return Err(Error::Config("no reference files given".into()));
        }
        let streams = paths
            .iter()
            .map(|p| {
                File::open(p.as_ref())
                    .map(BufReader::new)
                    .map_err(|e| Error::file(p.as_ref(), e))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_streams(streams)
    }
}

fn read_nonempty_lines<R: BufRead>(reader: R) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (i, l) in reader.lines().enumerate() {
        let l = l?;
        if l.trim().is_empty() {
            return Err(Error::parse(i + 1, "empty line"));
        }
        out.push(l);
    }
    Ok(out)
}

/// Reads a bitext (or a tune set: source plus one reference stream). Line
/// `i` of each stream becomes sentence `i`.
pub fn load_parallel<R1: BufRead, R2: BufRead>(
    source: R1,
    target: R2,
) -> Result<(SourceCorpus, ReferenceSet)> {
    let src: Vec<String> = source.lines().collect::<std::io::Result<_>>()?;
    let tgt: Vec<String> = target.lines().collect::<std::io::Result<_>>()?;
    if src.len() != tgt.len() {
        return Err(Error::LineCountMismatch(src.len(), tgt.len()));
    }
    for (i, (s, t)) in src.iter().zip(&tgt).enumerate() {
        if s.trim().is_empty() {
            return Err(Error::parse(i + 1, "empty source line"));
        }
        if t.trim().is_empty() {
            return Err(Error::parse(i + 1, "empty target line"));
        }
    }
    Ok((
        SourceCorpus { sentences: src },
        ReferenceSet {
            refs: tgt.into_iter().map(|t| vec![t]).collect(),
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelFormat {
    /// `PREFIX.src` and `PREFIX.tgt`, line-aligned.
    Parallel,
    /// `PREFIX.tsv` with `SOURCE\tTARGET` lines.
    Tsv,
}

impl std::str::FromStr for LabelFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" | "parallel-files" => Ok(Self::Parallel),
            "tsv" => Ok(Self::Tsv),
            other => Err(Error::Config(format!("unknown label format `{other}`"))),
        }
    }
}

/// Rendered pseudo-label dataset, ready to be written to disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RenderedLabels {
    Parallel { src: String, tgt: String },
    Tsv(String),
}

impl RenderedLabels {
    /// Writes the rendering next to `prefix` and returns the created paths.
    pub fn write_to(&self, prefix: &Path) -> Result<Vec<PathBuf>> {
        let files: Vec<(PathBuf, &str)> = match self {
            RenderedLabels::Parallel { src, tgt } => vec![
                (with_suffix(prefix, "src"), src.as_str()),
                (with_suffix(prefix, "tgt"), tgt.as_str()),
            ],
            RenderedLabels::Tsv(body) => vec![(with_suffix(prefix, "tsv"), body.as_str())],
        };
        for (path, body) in &files {
            std::fs::write(path, body).map_err(|e| Error::file(path, e))?;
        }
        Ok(files.into_iter().map(|(p, _)| p).collect())
    }
}

/// Appends `.ext` to the final path component.
pub fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Renders pseudo-labels in sentence-id order.
pub fn render_pseudo_labels(
    sources: &SourceCorpus,
    labels: &BTreeMap<usize, String>,
    format: LabelFormat,
) -> Result<RenderedLabels> {
    for sid in 0..sources.len() {
        if !labels.contains_key(&sid) {
            return Err(Error::MissingLabel(sid));
        }
    }
    if let Some(&extra) = labels.keys().find(|&&k| k >= sources.len()) {
        return Err(Error::Misaligned(format!(
            "label for sentence {extra} but only {} sources",
            sources.len()
        )));
    }
    let mut src_out = String::new();
    let mut tgt_out = String::new();
    for (sid, (source, label)) in sources.sentences.iter().zip(labels.values()).enumerate() {
        if label.contains('\n') || label.contains('\r') {
            return Err(Error::InvalidLabel {
                sid,
                msg: "label contains a newline".into(),
            });
        }
        if source.contains('\n') || source.contains('\r') {
            return Err(Error::InvalidLabel {
                sid,
                msg: "source contains a newline".into(),
            });
        }
        match format {
            LabelFormat::Parallel => {
                src_out.push_str(source);
                src_out.push('\n');
                tgt_out.push_str(label);
                tgt_out.push('\n');
            }
            LabelFormat::Tsv => {
                if label.contains('\t') {
                    return Err(Error::InvalidLabel {
                        sid,
                        msg: "label contains a tab".into(),
                    });
                }
                if source.contains('\t') {
                    return Err(Error::InvalidLabel {
                        sid,
                        msg: "source contains a tab".into(),
                    });
                }
                tgt_out.push_str(source);
                tgt_out.push('\t');
                tgt_out.push_str(label);
                tgt_out.push('\n');
            }
        }
    }
    Ok(match format {
        LabelFormat::Parallel => RenderedLabels::Parallel {
            src: src_out,
            tgt: tgt_out,
        },
        LabelFormat::Tsv => RenderedLabels::Tsv(tgt_out),
    })
}

/// Renders and writes pseudo-labels under `prefix`.
pub fn write_pseudo_labels(
    sources: &SourceCorpus,
    labels: &BTreeMap<usize, String>,
    format: LabelFormat,
    prefix: &Path,
) -> Result<Vec<PathBuf>> {
    render_pseudo_labels(sources, labels, format)?.write_to(prefix)
}
