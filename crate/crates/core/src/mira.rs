//! Batch k-best MIRA tuning of log-linear reranking weights.
//!
//! Each epoch visits the tune sentences in a seeded shuffled order. For every
//! sentence the hope hypothesis maximizes model score plus sentence BLEU and
//! the fear hypothesis maximizes model score minus sentence BLEU. When the
//! model prefers fear by less than the BLEU gap, the weights move along the
//! feature difference with a step capped at `c`. The running mean of the
//! weights over an epoch is that epoch's candidate; the candidate with the
//! best tune-set corpus BLEU wins, the initial weights included.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{parse_decimal, NBestCorpus, ReferenceSet};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::metrics::{BleuScore, HypothesisStats};
use crate::rerank::{first_argmax, model_scores, select};

/// Weights keyed by feature name, in feature-matrix column order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    names: Vec<String>,
    weights: Vec<f64>,
}

impl WeightVector {
    pub fn new(names: Vec<String>, weights: Vec<f64>) -> Result<Self> {
        if names.len() != weights.len() {
            return Err(Error::NameMismatch(format!(
                "{} names but {} weights",
                names.len(),
                weights.len()
            )));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::DuplicateFeature(n.clone()));
            }
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::NameMismatch(format!(
                "weight of `{}` is not finite",
                names[i]
            )));
        }
        Ok(Self { names, weights })
    }

    pub fn zeros(names: &[String]) -> Self {
        Self {
            names: names.to_vec(),
            weights: vec![0.0; names.len()],
        }
    }

    /// Weight 1 on `name`, 0 elsewhere.
    pub fn one_hot(names: &[String], name: &str) -> Result<Self> {
        let mut w = Self::zeros(names);
        let i = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::NameMismatch(format!("no feature `{name}`")))?;
        w.weights[i] = 1.0;
        Ok(w)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.weights[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.weights.iter().copied())
    }

    /// Weights reordered to `columns`, which must name exactly the same set.
    pub fn aligned_to(&self, columns: &[String]) -> Result<Vec<f64>> {
        if columns.len() != self.names.len() {
            return Err(Error::NameMismatch(format!(
                "{} weights for {} features",
                self.names.len(),
                columns.len()
            )));
        }
        columns
            .iter()
            .map(|c| {
                self.get(c)
                    .ok_or_else(|| Error::NameMismatch(format!("no weight for feature `{c}`")))
            })
            .collect()
    }

    /// `NAME\tWEIGHT` lines, plus an optional `#best_epoch` trailer.
    pub fn write_tsv<W: Write>(&self, mut out: W, trailer: Option<(usize, f64)>) -> Result<()> {
        for (n, w) in self.iter() {
            writeln!(out, "{n}\t{w}")?;
        }
        if let Some((epoch, bleu)) = trailer {
            writeln!(out, "#best_epoch\t{epoch}\t#tune_bleu\t{bleu:.4}")?;
        }
        Ok(())
    }

    /// Reads `NAME\tWEIGHT` lines; `#` lines are comments.
    pub fn read_tsv<R: BufRead>(reader: R) -> Result<Self> {
        let mut names = Vec::new();
        let mut weights = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.starts_with('#') || line.is_empty() {
                continue;
            }
            let (name, value) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(idx + 1, "expected NAME<TAB>WEIGHT"))?;
            let w = parse_decimal(value)
                .ok_or_else(|| Error::parse(idx + 1, format!("bad weight `{value}`")))?;
            names.push(name.to_string());
            weights.push(w);
        }
        Self::new(names, weights)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
        Self::read_tsv(std::io::BufReader::new(f))
    }
}

/// Starting point for tuning.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum InitWeights {
    /// All zeros, except 1.0 on the `total` passthrough when present.
    #[default]
    Baseline,
    Zeros,
    /// 1.0 on every feature.
    Uniform,
    Given(WeightVector),
}

impl InitWeights {
    pub fn resolve(&self, names: &[String]) -> Result<WeightVector> {
        match self {
            InitWeights::Baseline => {
                let mut w = WeightVector::zeros(names);
                if let Some(i) = names.iter().position(|n| n == "total") {
                    w.weights[i] = 1.0;
                }
                Ok(w)
            }
            InitWeights::Zeros => Ok(WeightVector::zeros(names)),
            InitWeights::Uniform => WeightVector::new(names.to_vec(), vec![1.0; names.len()]),
            InitWeights::Given(w) => WeightVector::new(names.to_vec(), w.aligned_to(names)?),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiraConfig {
    /// Step-size cap.
    pub c: f64,
    pub epochs: usize,
    pub seed: u64,
    pub init: InitWeights,
}

impl Default for MiraConfig {
    fn default() -> Self {
        Self {
            c: 0.01,
            epochs: 30,
            seed: 0,
            init: InitWeights::Baseline,
        }
    }
}

impl MiraConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Config(format!(
                "MIRA c must be positive, got {}",
                self.c
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("MIRA epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Serializable form of the MIRA settings used in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiraSettings {
    pub c: f64,
    pub epochs: usize,
    pub seed: u64,
    /// `baseline`, `zeros` or `uniform`.
    pub init: String,
}

impl Default for MiraSettings {
    fn default() -> Self {
        let d = MiraConfig::default();
        Self {
            c: d.c,
            epochs: d.epochs,
            seed: d.seed,
            init: "baseline".into(),
        }
    }
}

impl TryFrom<&MiraSettings> for MiraConfig {
    type Error = Error;

    fn try_from(s: &MiraSettings) -> Result<Self> {
        let init = match s.init.as_str() {
            "baseline" => InitWeights::Baseline,
            "zeros" => InitWeights::Zeros,
            "uniform" => InitWeights::Uniform,
            other => return Err(Error::Config(format!("unknown MIRA init `{other}`"))),
        };
        let cfg = MiraConfig {
            c: s.c,
            epochs: s.epochs,
            seed: s.seed,
            init,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 0 is the initialization.
    pub epoch: usize,
    pub weights: WeightVector,
    pub tune_bleu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneRun {
    pub best_weights: WeightVector,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TuneRun {
    pub fn best_bleu(&self) -> f64 {
        self.history[self.best_epoch].tune_bleu
    }
}

/// Outcome of a single margin update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiraStep {
    pub loss_before: f64,
    pub loss_after: f64,
    pub step: f64,
    pub capped: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Applies one MIRA update for a (hope, fear) pair. Returns `None` when the
/// margin is already satisfied or the pair has identical features.
pub fn mira_update(
    weights: &mut [f64],
    hope: &[f64],
    fear: &[f64],
    gain_hope: f64,
    gain_fear: f64,
    c: f64,
) -> Option<MiraStep> {
    let diff: Vec<f64> = hope.iter().zip(fear).map(|(h, f)| h - f).collect();
    let loss_before = (gain_hope - gain_fear) - dot(weights, &diff);
    if loss_before <= 0.0 {
        return None;
    }
    let norm2 = dot(&diff, &diff);
    if norm2 == 0.0 {
        return None;
    }
    let unclipped = loss_before / norm2;
    let step = unclipped.min(c);
    for (w, d) in weights.iter_mut().zip(&diff) {
        *w += step * d;
    }
    Some(MiraStep {
        loss_before,
        loss_after: (gain_hope - gain_fear) - dot(weights, &diff),
        step,
        capped: unclipped > c,
    })
}

/// Hope and fear ranks given model scores and per-hypothesis gains.
pub fn hope_fear(scores: &[f64], gains: &[f64]) -> (usize, usize) {
    let hope: Vec<f64> = scores.iter().zip(gains).map(|(s, g)| s + g).collect();
    let fear: Vec<f64> = scores.iter().zip(gains).map(|(s, g)| s - g).collect();
    (first_argmax(&hope), first_argmax(&fear))
}

fn check_inputs(matrix: &FeatureMatrix, corpus: &NBestCorpus, refs: &ReferenceSet) -> Result<()> {
    if matrix.num_features() == 0 {
        return Err(Error::ZeroFeatures);
    }
    matrix.check_aligned(corpus)?;
    refs.check_aligned(corpus.len())
}

/// Corpus BLEU of the per-sentence argmax under `weights`.
pub fn evaluate_weights(
    matrix: &FeatureMatrix,
    corpus: &NBestCorpus,
    refs: &ReferenceSet,
    weights: &WeightVector,
) -> Result<BleuScore> {
    check_inputs(matrix, corpus, refs)?;
    let w = weights.aligned_to(matrix.names())?;
    let stats = HypothesisStats::compute(corpus, refs)?;
    Ok(stats.corpus_bleu(&select(matrix, &w, None)?))
}

/// Tunes weights by batch k-best MIRA against sentence-level BLEU.
pub fn tune_mira(
    matrix: &FeatureMatrix,
    corpus: &NBestCorpus,
    refs: &ReferenceSet,
    config: &MiraConfig,
) -> Result<TuneRun> {
    config.validate()?;
    check_inputs(matrix, corpus, refs)?;
    let names = matrix.names().to_vec();
    let stats = HypothesisStats::compute(corpus, refs)?;
    let gains = stats.sentence_bleu();
    let evaluate =
        |w: &[f64]| -> Result<f64> { Ok(stats.corpus_bleu(&select(matrix, w, None)?).value) };

    let mut weights = config.init.resolve(&names)?.weights;
    let mut history = vec![EpochRecord {
        epoch: 0,
        weights: WeightVector::new(names.clone(), weights.clone())?,
        tune_bleu: evaluate(&weights)?,
    }];

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..matrix.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = vec![0.0; names.len()];
        for &sid in &order {
            let sf = matrix.sentence(sid);
            let scores = model_scores(sf, &weights, None);
            let (hope, fear) = hope_fear(&scores, &gains[sid]);
            if hope != fear {
                mira_update(
                    &mut weights,
                    sf.row(hope),
                    sf.row(fear),
                    gains[sid][hope],
                    gains[sid][fear],
                    config.c,
                );
            }
            for (s, w) in sum.iter_mut().zip(&weights) {
                *s += w;
            }
        }
        let averaged: Vec<f64> = sum.iter().map(|s| s / order.len() as f64).collect();
        let tune_bleu = evaluate(&averaged)?;
        log::debug!("mira epoch {epoch}: tune BLEU {tune_bleu:.4}");
        history.push(EpochRecord {
            epoch,
            weights: WeightVector::new(names.clone(), averaged)?,
            tune_bleu,
        });
    }

    let mut best_epoch = 0;
    for (i, rec) in history.iter().enumerate() {
        if rec.tune_bleu > history[best_epoch].tune_bleu {
            best_epoch = i;
        }
    }
    Ok(TuneRun {
        best_weights: history[best_epoch].weights.clone(),
        history,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(n: &[&str]) -> Vec<String> {
        n.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn init_variants() {
        let n = names(&["lm", "total"]);
        assert_eq!(
            InitWeights::Baseline.resolve(&n).unwrap().weights(),
            [0.0, 1.0]
        );
        assert_eq!(
            InitWeights::Zeros.resolve(&n).unwrap().weights(),
            [0.0, 0.0]
        );
        assert_eq!(
            InitWeights::Uniform.resolve(&n).unwrap().weights(),
            [1.0, 1.0]
        );
        let given = WeightVector::new(names(&["total", "lm"]), vec![2.0, 3.0]).unwrap();
        assert_eq!(
            InitWeights::Given(given).resolve(&n).unwrap().weights(),
            [3.0, 2.0]
        );
    }

    #[test]
    fn config_validation() {
        assert!(MiraConfig {
            c: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(MiraConfig {
            epochs: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(MiraConfig::default().validate().is_ok());
    }

    #[test]
    fn weights_file_round_trip() {
        let w = WeightVector::new(names(&["a", "b"]), vec![0.1, -2.5e-7]).unwrap();
        let mut buf = Vec::new();
        w.write_tsv(&mut buf, Some((3, 41.23456))).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(
            text.ends_with("#best_epoch\t3\t#tune_bleu\t41.2346\n"),
            "{text}"
        );
        assert_eq!(WeightVector::read_tsv(buf.as_slice()).unwrap(), w);
    }

    #[test]
    fn update_closes_margin_when_uncapped() {
        let mut w = vec![0.0, 0.0];
        let s = mira_update(&mut w, &[1.0, 0.0], &[0.0, 1.0], 10.0, 0.0, 100.0).unwrap();
        assert!(!s.capped);
        assert!((s.step - 5.0).abs() < 1e-12);
        assert!(s.loss_after.abs() < 1e-9);
        assert_eq!(w, vec![5.0, -5.0]);
    }

    #[test]
    fn update_skips_satisfied_margin() {
        let mut w = vec![10.0];
        assert!(mira_update(&mut w, &[1.0], &[0.0], 1.0, 0.0, 1.0).is_none());
        assert!(mira_update(&mut w, &[1.0], &[1.0], 5.0, 0.0, 1.0).is_none());
    }

    proptest! {
        #[test]
        fn update_reduces_violation(
            w in prop::collection::vec(-5.0f64..5.0, 3),
            hope in prop::collection::vec(-5.0f64..5.0, 3),
            fear in prop::collection::vec(-5.0f64..5.0, 3),
            gh in 0.0f64..100.0,
            gf in 0.0f64..100.0,
            c in 1e-4f64..10.0,
        ) {
            let mut w = w;
            if let Some(s) = mira_update(&mut w, &hope, &fear, gh, gf, c) {
                prop_assert!(s.loss_after < s.loss_before);
                prop_assert!(s.step <= c);
                if !s.capped {
                    prop_assert!(s.loss_after.abs() <= 1e-9 * (1.0 + s.loss_before.abs()));
                }
            }
        }

        #[test]
        fn hope_fear_shift_invariant(
            rows in prop::collection::vec((-20i32..20, 0i32..100), 1..8),
            shift in -50i32..50,
        ) {
            let scores: Vec<f64> = rows.iter().map(|r| r.0 as f64).collect();
            let gains: Vec<f64> = rows.iter().map(|r| r.1 as f64).collect();
            let shifted: Vec<f64> = gains.iter().map(|g| g + shift as f64).collect();
            prop_assert_eq!(hope_fear(&scores, &gains), hope_fear(&scores, &shifted));
        }
    }
}
